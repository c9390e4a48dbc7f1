//! Encoder → primary capsules → routing → mask → decoder.

mod config;
mod params;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{
    derive_chain, ConvSpec, DecoderSpec, DeconvSpec, MaskMode, Mode, ModelConfig, ShapeChain, Stage, PRESETS,
};
pub use params::{Init, ParamSpec, ParamStore};

use crate::autodiff::{AutodiffError, ConvAttrs, Tape, Var};
use crate::capsule::{capsule_lengths, squash, CapsuleLevel, CapsuleSet, OpsError};
use crate::real::Real;
use crate::routing::{predict_vectors, route_supervised, route_unsupervised, RoutingGradient, ROUTING_INIT_STD};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{detail}\nderived chain:\n{chain}")]
    Chain { detail: String, chain: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("supervised training needs labels")]
    MissingLabels,
    #[error("parameters do not match the model: {0}")]
    Params(String),
    #[error("input shape {got:?} does not match the model's {want:?}")]
    Input { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Ops(#[from] OpsError),
}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        ModelError::Ops(OpsError::Autodiff(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingOptions {
    pub iterations: usize,
    pub gradient: RoutingGradient,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        RoutingOptions { iterations: 3, gradient: RoutingGradient::FinalIteration }
    }
}

/// Which capsule a supervised model forwards to its decoder.
#[derive(Clone, Copy, Debug)]
pub enum Masking<'a> {
    Labels(&'a [usize]),
    /// The longest capsule (inference).
    Predicted,
}

/// Parameters registered on a tape, in spec order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; zeros where nothing reached a tensor.
    pub fn take_grads<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub primary: CapsuleSet,
    pub capsules: CapsuleSet,
    /// `(N, classes)`; supervised only.
    pub lengths: Option<Var>,
    pub predicted: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    /// `(N, representation dim)`.
    pub z: Var,
    pub x_hat: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    chain: ShapeChain,
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
}

fn uniform(fan_in: usize) -> Init {
    Init::Uniform(1.0 / (fan_in as f64).sqrt())
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        let chain = derive_chain(&config)?;
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
        let bn = config.batch_norm;

        let mut c = config.input_shape[0];
        let last = config.encoder.len() - 1;
        for (i, l) in config.encoder.iter().enumerate() {
            let fan = uniform(c * l.kernel * l.kernel);
            add(format!("encoder.{i}.weight"), vec![l.filters, c, l.kernel, l.kernel], fan);
            // a normalised layer's shift takes the place of its bias
            if bn && i < last {
                add(format!("encoder.{i}.bn_scale"), vec![l.filters], Init::Ones);
                add(format!("encoder.{i}.bn_shift"), vec![l.filters], Init::Zeros);
            } else {
                add(format!("encoder.{i}.bias"), vec![l.filters], fan);
            }
            c = l.filters;
        }
        add(
            "routing.weight".into(),
            vec![chain.primary_count, config.primary_dim, config.outputs() * config.capsule_dim],
            Init::Normal { std: ROUTING_INIT_STD },
        );

        let z = config.representation_dim();
        match &config.decoder {
            DecoderSpec::Fc { hidden } => {
                let mut width = z;
                let widths: Vec<usize> = hidden.iter().copied().chain([config.input_len()]).collect();
                for (i, &out) in widths.iter().enumerate() {
                    add(format!("decoder.{i}.weight"), vec![width, out], uniform(width));
                    if bn && i + 1 < widths.len() {
                        add(format!("decoder.{i}.bn_scale"), vec![out], Init::Ones);
                        add(format!("decoder.{i}.bn_shift"), vec![out], Init::Zeros);
                    } else {
                        add(format!("decoder.{i}.bias"), vec![out], uniform(width));
                    }
                    width = out;
                }
            }
            DecoderSpec::Deconv { seed, layers } => {
                let mut c = z;
                if let Some([sc, sh, sw]) = *seed {
                    let out = sc * sh * sw;
                    add("decoder.seed.weight".into(), vec![z, out], uniform(z));
                    if bn {
                        add("decoder.seed.bn_scale".into(), vec![out], Init::Ones);
                        add("decoder.seed.bn_shift".into(), vec![out], Init::Zeros);
                    } else {
                        add("decoder.seed.bias".into(), vec![out], uniform(z));
                    }
                    c = sc;
                }
                for (i, l) in layers.iter().enumerate() {
                    let fan = uniform(l.filters * l.kernel * l.kernel);
                    add(format!("decoder.{i}.weight"), vec![c, l.filters, l.kernel, l.kernel], fan);
                    if bn && i + 1 < layers.len() {
                        add(format!("decoder.{i}.bn_scale"), vec![l.filters], Init::Ones);
                        add(format!("decoder.{i}.bn_shift"), vec![l.filters], Init::Zeros);
                    } else {
                        add(format!("decoder.{i}.bias"), vec![l.filters], fan);
                    }
                    c = l.filters;
                }
            }
        }
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Model { config, chain, specs, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn chain(&self) -> &ShapeChain {
        &self.chain
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::len).sum()
    }

    pub fn init_params<T: Real>(&self, rng: &mut ChaCha8Rng) -> ParamStore<T> {
        ParamStore::init(&self.specs, rng)
    }

    /// Architecture chain followed by one line per parameter tensor.
    pub fn summary(&self) -> String {
        let mut s = self.chain.to_string();
        s.push('\n');
        for p in &self.specs {
            let shape = p.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(s, "{:<24} {:<20} {}", p.name, shape, p.len());
        }
        let _ = writeln!(s, "{:<24} {:<20} {}", "total", "", self.param_count());
        s
    }

    /// Registers `params` on the tape; `trainable` decides whether they
    /// collect gradients.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, trainable: bool) -> Result<Bound> {
        if !params.matches(&self.specs) {
            let first_bad = self
                .specs
                .iter()
                .zip(params.iter())
                .find(|(s, (n, v))| s.name != *n || s.shape.as_slice() != v.shape())
                .map(|(s, _)| s.name.clone())
                .unwrap_or_else(|| format!("expected {} tensors, got {}", self.specs.len(), params.len()));
            return Err(ModelError::Params(first_bad));
        }
        let vars = params.values().iter().map(|v| tape.leaf(v.clone(), trainable)).collect();
        Ok(Bound { vars })
    }

    /// Wraps variables already on the tape, e.g. leaves owned by a
    /// gradient checker.
    pub fn bind_vars<T: Real>(&self, tape: &Tape<T>, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.specs.len() {
            return Err(ModelError::Params(format!("expected {} tensors, got {}", self.specs.len(), vars.len())));
        }
        if let Some(s) = self.specs.iter().zip(vars).find(|(s, &v)| tape.shape(v) != s.shape.as_slice()) {
            return Err(ModelError::Params(s.0.name.clone()));
        }
        Ok(Bound { vars: vars.to_vec() })
    }

    fn p(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn maybe_p(&self, bound: &Bound, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| bound.vars[i])
    }

    fn batch_norm<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let (Some(scale), Some(shift)) =
            (self.maybe_p(bound, &format!("{prefix}.bn_scale")), self.maybe_p(bound, &format!("{prefix}.bn_shift")))
        else {
            return Ok(x);
        };
        batch_norm(tape, x, scale, shift)
    }

    /// Encoder, primary capsules and routing.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, routing: RoutingOptions) -> Result<Encoded> {
        let want: Vec<usize> = self.config.input_shape.to_vec();
        let got = tape.shape(x).to_vec();
        if got.len() != 4 || got[1..] != want[..] {
            return Err(ModelError::Input { got, want });
        }
        let n = got[0];
        let mut h = x;
        let last = self.config.encoder.len() - 1;
        for (i, l) in self.config.encoder.iter().enumerate() {
            let w = self.p(bound, &format!("encoder.{i}.weight"));
            let b = self.maybe_p(bound, &format!("encoder.{i}.bias"));
            h = tape.conv2d(h, w, b, ConvAttrs::new(l.stride, l.padding))?;
            if i < last {
                h = self.batch_norm(tape, bound, h, &format!("encoder.{i}"))?;
                h = tape.relu(h)?;
            }
        }
        let [_, c, hh, ww] = tape.shape(h).to_vec()[..] else { unreachable!("conv output is 4-D") };
        let pd = self.config.primary_dim;
        // consecutive `pd` channels at one position form a capsule
        h = tape.reshape(h, &[n, c / pd, pd, hh * ww])?;
        h = tape.permute(h, &[0, 1, 3, 2])?;
        h = tape.reshape(h, &[n, c / pd * hh * ww, pd])?;
        let u = squash(tape, h, 2)?;
        let primary = CapsuleSet::new(tape, u, CapsuleLevel::Primary)?;

        let w = self.p(bound, "routing.weight");
        let u_hat = predict_vectors(tape, &primary, w, self.config.outputs())?;
        let (capsules, lengths, predicted) = match self.config.mode {
            Mode::Supervised => {
                let v = route_supervised(tape, u_hat, routing.iterations, routing.gradient)?;
                let lengths = capsule_lengths(tape, &v)?;
                let predicted = argmax_rows(tape.value(lengths));
                (v, Some(lengths), predicted)
            }
            Mode::Unsupervised => {
                let u_hat = tape.reshape(u_hat, &[n, primary.count, self.config.capsule_dim])?;
                let v = route_unsupervised(tape, u_hat, routing.iterations, routing.gradient)?;
                (v, None, Vec::new())
            }
        };
        Ok(Encoded { primary, capsules, lengths, predicted })
    }

    /// The decoder input for `encoded`.
    pub fn represent<T: Real>(&self, tape: &mut Tape<T>, encoded: &Encoded, masking: Masking<'_>) -> Result<Var> {
        let caps = &encoded.capsules;
        let labels = match masking {
            Masking::Labels(l) => l,
            Masking::Predicted => &encoded.predicted,
        };
        match self.config.mask {
            MaskMode::Vector => mask_vector(tape, caps, labels),
            MaskMode::Matrix => mask_matrix(tape, caps, labels),
            MaskMode::None => {
                let n = tape.shape(caps.data)[0];
                Ok(tape.reshape(caps.data, &[n, caps.count * caps.dim])?)
            }
        }
    }

    /// Reconstruction `(N, C, H, W)` from `z (N, dim)`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, z: Var) -> Result<Var> {
        let zd = self.config.representation_dim();
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != zd {
            return Err(ModelError::Input { got: shape, want: vec![zd] });
        }
        let n = shape[0];
        let mut h = z;
        match &self.config.decoder {
            DecoderSpec::Fc { hidden } => {
                for i in 0..=hidden.len() {
                    h = self.linear(tape, bound, h, &format!("decoder.{i}"))?;
                    if i < hidden.len() {
                        h = self.batch_norm(tape, bound, h, &format!("decoder.{i}"))?;
                        h = tape.relu(h)?;
                    }
                }
                h = tape.sigmoid(h)?;
            }
            DecoderSpec::Deconv { seed, layers } => {
                match *seed {
                    Some([c, sh, sw]) => {
                        h = self.linear(tape, bound, h, "decoder.seed")?;
                        h = self.batch_norm(tape, bound, h, "decoder.seed")?;
                        h = tape.relu(h)?;
                        h = tape.reshape(h, &[n, c, sh, sw])?;
                    }
                    None => h = tape.reshape(h, &[n, zd, 1, 1])?,
                }
                for (i, l) in layers.iter().enumerate() {
                    let w = self.p(bound, &format!("decoder.{i}.weight"));
                    let b = self.maybe_p(bound, &format!("decoder.{i}.bias"));
                    let attrs = ConvAttrs { stride: l.stride, padding: l.padding, output_padding: l.output_padding };
                    h = tape.deconv2d(h, w, b, attrs)?;
                    if i + 1 < layers.len() {
                        h = self.batch_norm(tape, bound, h, &format!("decoder.{i}"))?;
                        h = tape.relu(h)?;
                    }
                }
                h = tape.sigmoid(h)?;
            }
        }
        let [c, hh, ww] = self.config.input_shape;
        Ok(tape.reshape(h, &[n, c, hh, ww])?)
    }

    fn linear<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(bound, &format!("{prefix}.weight"));
        let y = tape.matmul(x, w)?;
        match self.maybe_p(bound, &format!("{prefix}.bias")) {
            Some(b) => Ok(tape.add(y, b)?),
            None => Ok(y),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        masking: Masking<'_>,
        routing: RoutingOptions,
    ) -> Result<Forward> {
        let encoded = self.encode(tape, bound, x, routing)?;
        let z = self.represent(tape, &encoded, masking)?;
        let x_hat = self.decode(tape, bound, z)?;
        Ok(Forward { encoded, z, x_hat })
    }
}

/// Normalises with the statistics of the current batch over every axis but 1.
fn batch_norm<T: Real>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let reduce = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let mut m = v;
        for axis in (0..shape.len()).filter(|&a| a != 1) {
            m = tape.mean_axis(m, axis, true)?;
        }
        Ok(m)
    };
    let mu = reduce(tape, x)?;
    let centred = tape.sub(x, mu)?;
    let sq = tape.square(centred)?;
    let var = reduce(tape, sq)?;
    let var = tape.add_scalar(var, T::lit(BN_EPS))?;
    let sd = tape.sqrt(var)?;
    let normed = tape.div(centred, sd)?;
    let mut bshape = vec![1; shape.len()];
    bshape[1] = shape[1];
    let scale = tape.reshape(scale, &bshape)?;
    let shift = tape.reshape(shift, &bshape)?;
    let y = tape.mul(normed, scale)?;
    Ok(tape.add(y, shift)?)
}

/// Index of the first maximum in every row.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(cols.max(1))
        .map(|row| {
            row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

fn selector<T: Real>(tape: &mut Tape<T>, caps: &CapsuleSet, labels: &[usize]) -> Result<Var> {
    let n = tape.shape(caps.data)[0];
    if labels.len() != n {
        return Err(OpsError::Shape { op: "mask", detail: format!("{} labels for a batch of {n}", labels.len()) }.into());
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= caps.count) {
        return Err(ModelError::LabelOutOfRange { label, classes: caps.count });
    }
    let mut sel = Tensor::zeros(&[n, caps.count, 1]);
    for (row, &y) in labels.iter().enumerate() {
        sel.data_mut()[row * caps.count + y] = T::one();
    }
    Ok(tape.constant(sel))
}

/// Capsule `y` of every sample, verbatim: `(N, b)`.
pub fn mask_vector<T: Real>(tape: &mut Tape<T>, caps: &CapsuleSet, labels: &[usize]) -> Result<Var> {
    let sel = selector(tape, caps, labels)?;
    let kept = tape.mul(caps.data, sel)?;
    Ok(tape.sum_axis(kept, 1, false)?)
}

/// All capsules with every row but `y` zeroed, flattened: `(N, n·b)`.
pub fn mask_matrix<T: Real>(tape: &mut Tape<T>, caps: &CapsuleSet, labels: &[usize]) -> Result<Var> {
    let sel = selector(tape, caps, labels)?;
    let kept = tape.mul(caps.data, sel)?;
    let n = tape.shape(caps.data)[0];
    Ok(tape.reshape(kept, &[n, caps.count * caps.dim])?)
}
