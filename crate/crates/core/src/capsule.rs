//! Capsule kernels: squash, routing softmax, losses and the information
//! penalty on the representation.
//!
//! Reductions follow one convention throughout: per-sample quantities are
//! averaged over the batch. The margin loss sums over classes, the
//! reconstruction loss sums over pixels, and the information penalty averages
//! over representation components.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Added under the square root of the squash norm so gradients stay finite at
/// the origin.
pub const SQUASH_EPS: f64 = 1e-8;
pub const MARGIN_UPPER: f64 = 0.9;
pub const MARGIN_LOWER: f64 = 0.1;
pub const MARGIN_DOWN_WEIGHT: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpsError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("targets row {row} is not one-hot")]
    NotOneHot { row: usize },
    #[error("variance must be strictly positive (component {index} is {value})")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("routing needs at least one iteration")]
    NoIterations,
}

pub type Result<T> = std::result::Result<T, OpsError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapsuleLevel {
    Primary,
    Classified,
}

/// A `(batch, count, dim)` block of capsule vectors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleSet {
    pub data: Var,
    pub level: CapsuleLevel,
    pub count: usize,
    pub dim: usize,
}

impl CapsuleSet {
    pub fn new<T: Real>(tape: &Tape<T>, data: Var, level: CapsuleLevel) -> Result<Self> {
        match *tape.shape(data) {
            [_, count, dim] if dim >= 1 => Ok(CapsuleSet { data, level, count, dim }),
            ref s => Err(OpsError::Shape { op: "capsules", detail: format!("expected (N, count, dim), got {s:?}") }),
        }
    }
}

/// `‖v‖²/(1+‖v‖²) · v/‖v‖` along `axis`.
pub fn squash<T: Real>(tape: &mut Tape<T>, v: Var, axis: usize) -> Result<Var> {
    let sq = tape.square(v)?;
    let norm2 = tape.sum_axis(sq, axis, true)?;
    let norm = {
        let shifted = tape.add_scalar(norm2, T::lit(SQUASH_EPS))?;
        tape.sqrt(shifted)?
    };
    let one_plus = tape.add_scalar(norm2, T::one())?;
    let denom = tape.mul(one_plus, norm)?;
    let factor = tape.div(norm2, denom)?;
    Ok(tape.mul(v, factor)?)
}

/// Coupling coefficients from routing logits.
pub fn routing_softmax<T: Real>(tape: &mut Tape<T>, logits: Var, axis: usize) -> Result<Var> {
    Ok(tape.softmax(logits, axis)?)
}

pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (row, &y) in labels.iter().enumerate() {
        if y < classes {
            t.data_mut()[row * classes + y] = T::one();
        }
    }
    t
}

/// Σ_k [T_k·relu(0.9 − l_k)² + 0.5·(1 − T_k)·relu(l_k − 0.1)²], batch mean.
pub fn margin_loss<T: Real>(tape: &mut Tape<T>, lengths: Var, targets: &Tensor<T>) -> Result<Var> {
    let shape = tape.shape(lengths).to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() {
        return Err(OpsError::Shape {
            op: "margin_loss",
            detail: format!("lengths {shape:?} vs targets {:?}", targets.shape()),
        });
    }
    let classes = shape[1];
    for (row, chunk) in targets.data().chunks(classes).enumerate() {
        let ones = chunk.iter().filter(|&&v| v == T::one()).count();
        let zeros = chunk.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != classes {
            return Err(OpsError::NotOneHot { row });
        }
    }
    let present = tape.constant(targets.clone());
    let absent = tape.constant(targets.map(|t| T::lit(MARGIN_DOWN_WEIGHT) * (T::one() - t)));

    let neg = tape.scale(lengths, -T::one())?;
    let upper_gap = tape.add_scalar(neg, T::lit(MARGIN_UPPER))?;
    let upper = tape.relu(upper_gap)?;
    let upper = tape.square(upper)?;
    let upper = tape.mul(present, upper)?;

    let lower_gap = tape.add_scalar(lengths, -T::lit(MARGIN_LOWER))?;
    let lower = tape.relu(lower_gap)?;
    let lower = tape.square(lower)?;
    let lower = tape.mul(absent, lower)?;

    let per_class = tape.add(upper, lower)?;
    let per_sample = tape.sum_axis(per_class, 1, false)?;
    Ok(tape.mean(per_sample)?)
}

fn batch_rows<T: Real>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let rows = match shape.len() {
        0 => 1,
        1 => 1,
        _ => shape[0],
    };
    let cols = shape.iter().product::<usize>() / rows.max(1);
    Ok(tape.reshape(v, &[rows, cols])?)
}

/// Per-sample sum of squared differences, batch mean.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(OpsError::Shape {
            op: "reconstruction_loss",
            detail: format!("input {:?} vs reconstruction {:?}", tape.shape(x), tape.shape(x_hat)),
        });
    }
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff)?;
    let rows = batch_rows(tape, sq)?;
    let per_sample = tape.sum_axis(rows, 1, false)?;
    Ok(tape.mean(per_sample)?)
}

/// Mean and variance of a factorized Gaussian posterior.
#[derive(Clone, Copy, Debug)]
pub struct GaussianMoments {
    pub mu: Var,
    pub sigma2: Var,
}

/// KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1), batch mean.
pub fn kl_gaussian<T: Real>(tape: &mut Tape<T>, m: &GaussianMoments) -> Result<Var> {
    if tape.shape(m.mu) != tape.shape(m.sigma2) {
        return Err(OpsError::Shape {
            op: "kl_gaussian",
            detail: format!("mu {:?} vs sigma2 {:?}", tape.shape(m.mu), tape.shape(m.sigma2)),
        });
    }
    if let Some((index, &value)) = tape.value(m.sigma2).data().iter().enumerate().find(|(_, &v)| v <= T::zero()) {
        return Err(OpsError::NonPositiveVariance { index, value: value.as_f64() });
    }
    let mu2 = tape.square(m.mu)?;
    let log_var = tape.log(m.sigma2)?;
    let a = tape.add(mu2, m.sigma2)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.add_scalar(b, -T::one())?;
    let half = tape.scale(c, T::lit(0.5))?;
    let rows = batch_rows(tape, half)?;
    let per_sample = tape.sum_axis(rows, 1, false)?;
    Ok(tape.mean(per_sample)?)
}

/// ½(mean_d v_d² − 1), batch mean. Only the mean of the representation is
/// constrained, so the value can be negative.
pub fn information_penalty<T: Real>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let rows = batch_rows(tape, v)?;
    let sq = tape.square(rows)?;
    let per_sample = tape.mean_axis(sq, 1, false)?;
    let shifted = tape.add_scalar(per_sample, -T::one())?;
    let half = tape.scale(shifted, T::lit(0.5))?;
    Ok(tape.mean(half)?)
}

/// Capsule lengths `(N, count)`; argmax over `count` is the predicted class.
pub fn capsule_lengths<T: Real>(tape: &mut Tape<T>, c: &CapsuleSet) -> Result<Var> {
    Ok(tape.l2norm(c.data, 2, false)?)
}

/// Per-batch loss record.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub margin: f64,
    pub reconstruction: f64,
    pub information: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub const RECOMPOSITION_TOL: f64 = 1e-6;

    pub fn recomposed(&self) -> f64 {
        self.margin + self.alpha * self.reconstruction + self.beta * self.information
    }

    /// `total` agrees with its parts to 1e-6, relative once `|total| > 1`.
    pub fn is_consistent(&self) -> bool {
        (self.total - self.recomposed()).abs() <= Self::RECOMPOSITION_TOL * self.total.abs().max(1.0)
    }
}
