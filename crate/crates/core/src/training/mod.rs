//! Optimisation loop, evaluation, checkpoints and β sweeps.

mod adam;
mod checkpoint;
mod sweep;

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use checkpoint::{content_hash, peek_precision, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sweep::{beta_sweep, trend_verdicts, worker_count, SweepCell, SweepOutcome, Verdict, VerdictKind};

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::capsule::{information_penalty, margin_loss, one_hot, reconstruction_loss, LossBreakdown, OpsError};
use crate::data::{BatchPlan, DataError, Dataset, Split};
use crate::model::{Forward, Masking, Mode, Model, ModelConfig, ModelError, ParamStore, RoutingOptions};
use crate::real::{Precision, Real};
use crate::rng::{stream, SplitRng};
use crate::routing::RoutingGradient;
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} loss")]
    NonFinite { component: &'static str },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<OpsError> for TrainError {
    fn from(e: OpsError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub routing_iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub routing_gradient: RoutingGradient,
    /// When false the information penalty is left out of the objective
    /// entirely (it is still logged).
    #[serde(default = "yes")]
    pub information_term: bool,
    /// Use only the first `n` training / test samples.
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default)]
    pub test_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.01,
            alpha: 1.0,
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 64,
            routing_iterations: 3,
            seed: 0,
            precision: Precision::F32,
            routing_gradient: RoutingGradient::FinalIteration,
            information_term: true,
            train_samples: None,
            test_samples: None,
        }
    }
}

impl TrainConfig {
    /// 10k/2k MNIST subsets, 5 epochs, batch 64.
    pub fn desk() -> Self {
        TrainConfig { epochs: 5, train_samples: Some(10_000), test_samples: Some(2_000), ..Self::default() }
    }

    /// Full splits, 100 epochs.
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be a finite value >= 0");
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.routing_iterations == 0 {
            return bad("routing_iterations must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        Ok(())
    }

    pub fn routing(&self) -> RoutingOptions {
        RoutingOptions { iterations: self.routing_iterations, gradient: self.routing_gradient }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate)
    }
}

/// One evaluation (or epoch of training) summarised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub margin: f64,
    pub recon: f64,
    pub info: f64,
    pub total: f64,
    /// Supervised only.
    pub accuracy: Option<f64>,
    pub mean_abs_z: f64,
    /// Per-component standard deviation of `z`, averaged over components.
    pub mean_std_z: f64,
    pub beta: f64,
    pub dim: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "epoch,split,margin,recon,info,total,accuracy,mean_abs_z,mean_std_z,beta,dim,seed";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let acc = self.accuracy.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split.as_str(),
            self.margin,
            self.recon,
            self.info,
            self.total,
            acc,
            self.mean_abs_z,
            self.mean_std_z,
            self.beta,
            self.dim,
            self.seed
        )
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(MetricsRow {
            epoch: f[0].parse().ok()?,
            split: match f[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return None,
            },
            margin: num(2)?,
            recon: num(3)?,
            info: num(4)?,
            total: num(5)?,
            accuracy: if f[6].is_empty() { None } else { Some(num(6)?) },
            mean_abs_z: num(7)?,
            mean_std_z: num(8)?,
            beta: num(9)?,
            dim: f[10].parse().ok()?,
            seed: f[11].parse().ok()?,
        })
    }

    pub fn breakdown(&self, alpha: f64) -> LossBreakdown {
        LossBreakdown {
            margin: self.margin,
            reconstruction: self.recon,
            information: self.info,
            total: self.total,
            alpha,
            beta: self.beta,
        }
    }
}

/// Running per-component moments of `z`.
#[derive(Clone, Debug, Default)]
pub struct ZStats {
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    abs_sum: f64,
}

impl ZStats {
    pub fn add<T: Real>(&mut self, z: &Tensor<T>) {
        let dim = *z.shape().last().unwrap_or(&1);
        if self.sum.is_empty() {
            self.sum = vec![0.0; dim];
            self.sum_sq = vec![0.0; dim];
        }
        for row in z.data().chunks(dim) {
            for (k, &v) in row.iter().enumerate() {
                let v = v.as_f64();
                self.sum[k] += v;
                self.sum_sq[k] += v * v;
                self.abs_sum += v.abs();
            }
            self.count += 1;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count.max(1) as f64).collect()
    }

    /// Population standard deviation per component.
    pub fn std(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / n;
                (q / n - m * m).max(0.0).sqrt()
            })
            .collect()
    }

    pub fn mean_abs(&self) -> f64 {
        self.abs_sum / (self.count.max(1) * self.sum.len().max(1)) as f64
    }

    pub fn mean_std(&self) -> f64 {
        let s = self.std();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

#[derive(Default)]
struct Accumulator {
    samples: usize,
    correct: usize,
    margin: f64,
    recon: f64,
    info: f64,
    total: f64,
    z: ZStats,
}

impl Accumulator {
    fn add<T: Real>(&mut self, n: usize, loss: &LossBreakdown, correct: Option<usize>, z: &Tensor<T>) {
        let w = n as f64;
        self.samples += n;
        self.correct += correct.unwrap_or(0);
        self.margin += w * loss.margin;
        self.recon += w * loss.reconstruction;
        self.info += w * loss.information;
        self.total += w * loss.total;
        self.z.add(z);
    }

    fn row(&self, epoch: usize, split: Split, supervised: bool, cfg: &TrainConfig, dim: usize) -> MetricsRow {
        let n = self.samples.max(1) as f64;
        MetricsRow {
            epoch,
            split,
            margin: self.margin / n,
            recon: self.recon / n,
            info: self.info / n,
            total: self.total / n,
            accuracy: supervised.then(|| self.correct as f64 / n),
            mean_abs_z: self.z.mean_abs(),
            mean_std_z: self.z.mean_std(),
            beta: cfg.beta,
            dim,
            seed: cfg.seed,
        }
    }
}

/// Result of one optimisation step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub correct: Option<usize>,
}

fn named(component: &'static str) -> impl Fn(OpsError) -> TrainError {
    move |e| match e {
        OpsError::Autodiff(AutodiffError::NonFinite { .. }) => TrainError::NonFinite { component },
        e => e.into(),
    }
}

fn forward_error(e: ModelError) -> TrainError {
    match e {
        ModelError::Ops(OpsError::Autodiff(AutodiffError::NonFinite { .. })) => {
            TrainError::NonFinite { component: "forward" }
        }
        e => e.into(),
    }
}

/// Owns one model's parameters and optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    model: Model,
    cfg: TrainConfig,
    params: ParamStore<T>,
    adam: AdamState<T>,
    /// Completed epochs.
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(model_cfg)?;
        let params = model.init_params(&mut SplitRng::new(cfg.seed).stream(stream::INIT));
        let adam = AdamState::zeros_like(params.values());
        Ok(Trainer { model, cfg, params, adam, epoch: 0 })
    }

    pub(crate) fn from_parts(
        model: Model,
        cfg: TrainConfig,
        params: ParamStore<T>,
        adam: AdamState<T>,
        epoch: usize,
    ) -> Self {
        Trainer { model, cfg, params, adam, epoch }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Moves the stopping point, e.g. to continue a finished run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        TrainConfig { epochs, ..self.cfg.clone() }.validate()?;
        self.cfg.epochs = epochs;
        Ok(())
    }

    fn supervised(&self) -> bool {
        self.model.config().mode == Mode::Supervised
    }

    /// Loss of one forward pass; the margin uses `labels` when supervised.
    fn objective(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        out: &Forward,
        labels: Option<&[usize]>,
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.cfg;
        let margin = match (self.supervised(), out.encoded.lengths) {
            (true, Some(lengths)) => {
                let y = labels.ok_or(ModelError::MissingLabels)?;
                let targets = one_hot::<T>(y, self.model.config().classes);
                Some(margin_loss(tape, lengths, &targets).map_err(named("margin"))?)
            }
            _ => None,
        };
        let recon = reconstruction_loss(tape, x, out.x_hat).map_err(named("reconstruction"))?;
        let info = information_penalty(tape, out.z).map_err(named("information"))?;

        let total = (|| -> std::result::Result<Var, AutodiffError> {
            let mut total = tape.scale(recon, T::lit(cfg.alpha))?;
            if let Some(m) = margin {
                total = tape.add(m, total)?;
            }
            if cfg.information_term {
                let weighted = tape.scale(info, T::lit(cfg.beta))?;
                total = tape.add(total, weighted)?;
            }
            Ok(total)
        })()
        .map_err(|e| named("total")(e.into()))?;

        let scalar = |v: Var| tape.value(v).item().as_f64();
        let loss = LossBreakdown {
            margin: margin.map(scalar).unwrap_or(0.0),
            reconstruction: scalar(recon),
            information: scalar(info),
            total: scalar(total),
            alpha: cfg.alpha,
            beta: if cfg.information_term { cfg.beta } else { 0.0 },
        };
        Ok((total, loss))
    }

    fn correct(out: &Forward, labels: Option<&[usize]>) -> Option<usize> {
        let y = labels?;
        out.encoded.lengths?;
        Some(out.encoded.predicted.iter().zip(y).filter(|(p, y)| p == y).count())
    }

    /// Forward, backward and one Adam update on a batch.
    pub fn train_step(&mut self, x: &Tensor<f32>, labels: Option<&[usize]>) -> Result<StepReport> {
        let (report, _) = self.step_inner(x, labels)?;
        Ok(report)
    }

    fn step_inner(&mut self, x: &Tensor<f32>, labels: Option<&[usize]>) -> Result<(StepReport, Tensor<T>)> {
        let masking = match (self.supervised(), labels) {
            (true, Some(y)) => Masking::Labels(y),
            (true, None) => return Err(ModelError::MissingLabels.into()),
            (false, _) => Masking::Predicted,
        };
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, &self.params, true)?;
        let xv = tape.constant(x.cast());
        let out = self.model.forward(&mut tape, &bound, xv, masking, self.cfg.routing()).map_err(forward_error)?;
        let (total, loss) = self.objective(&mut tape, xv, &out, labels)?;
        tape.backward(total).map_err(|e| match e {
            AutodiffError::NonFinite { .. } => TrainError::NonFinite { component: "gradient" },
            e => e.into(),
        })?;
        let grads = bound.take_grads(&mut tape);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(TrainError::NonFinite { component: "gradient" });
        }
        self.adam.step(&self.cfg.adam(), self.params.values_mut(), &grads);
        let report = StepReport { loss, correct: Self::correct(&out, labels) };
        Ok((report, tape.value(out.z).clone()))
    }

    /// One pass over `train`; returns the epoch's running averages.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<MetricsRow> {
        let plan = BatchPlan::new(self.cfg.batch_size, self.cfg.seed);
        let mut acc = Accumulator::default();
        for idx in plan.epoch(train.len(), self.epoch as u64)? {
            let (x, y) = train.gather(&idx);
            let (report, z) = self.step_inner(&x, y.as_deref())?;
            acc.add(idx.len(), &report.loss, report.correct, &z);
        }
        self.epoch += 1;
        let dim = self.model.config().capsule_dim;
        Ok(acc.row(self.epoch, Split::Train, self.supervised(), &self.cfg, dim))
    }

    /// Losses, accuracy and `z` statistics over `ds`, masking by the
    /// predicted class.
    pub fn evaluate(&self, ds: &Dataset) -> Result<MetricsRow> {
        let mut acc = Accumulator::default();
        for start in (0..ds.len()).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(ds.len())).collect();
            let (x, y) = ds.gather(&idx);
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, &self.params, false)?;
            let xv = tape.constant(x.cast());
            let out =
                self.model.forward(&mut tape, &bound, xv, Masking::Predicted, self.cfg.routing()).map_err(forward_error)?;
            let (_, loss) = self.objective(&mut tape, xv, &out, y.as_deref())?;
            acc.add(idx.len(), &loss, Self::correct(&out, y.as_deref()), tape.value(out.z));
        }
        let dim = self.model.config().capsule_dim;
        Ok(acc.row(self.epoch, ds.split(), self.supervised(), &self.cfg, dim))
    }

    /// Trains until `cfg.epochs` epochs are complete, evaluating on `test`
    /// after each. `on_epoch` sees the trainer and that epoch's rows.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Self, &[MetricsRow]) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.epoch < self.cfg.epochs {
            let mut epoch_rows = vec![self.run_epoch(train)?];
            if let Some(test) = test {
                epoch_rows.push(self.evaluate(test)?);
            }
            on_epoch(self, &epoch_rows)?;
            rows.extend(epoch_rows);
        }
        Ok(rows)
    }

    /// Representations of `x`, masked by the predicted class.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, &self.params, false)?;
        let xv = tape.constant(x.cast());
        let enc = self.model.encode(&mut tape, &bound, xv, self.cfg.routing())?;
        let z = self.model.represent(&mut tape, &enc, Masking::Predicted)?;
        Ok((tape.value(z).clone(), enc.predicted))
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, &self.params, false)?;
        let zv = tape.constant(z.clone());
        let x_hat = self.model.decode(&mut tape, &bound, zv)?;
        Ok(tape.value(x_hat).cast())
    }

    /// The training and test subsets this config trains on.
    pub fn subsets<'a>(&self, train: &'a Dataset, test: &'a Dataset) -> (Cow<'a, Dataset>, Cow<'a, Dataset>) {
        let cut = |ds: &'a Dataset, n: Option<usize>| match n {
            Some(n) if n < ds.len() => Cow::Owned(ds.head(n)),
            _ => Cow::Borrowed(ds),
        };
        (cut(train, self.cfg.train_samples), cut(test, self.cfg.test_samples))
    }
}
