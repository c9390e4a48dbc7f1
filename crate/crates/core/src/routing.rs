//! Routing-by-agreement between capsule layers.
//!
//! Supervised routing distributes every input capsule over `n` output
//! capsules (softmax over outputs). Unsupervised routing merges all inputs into
//! a single output capsule; its couplings are normalised over the input index,
//! since a softmax over one output would pin every coupling to 1.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::capsule::{squash, CapsuleLevel, CapsuleSet, OpsError, Result};
use crate::real::Real;
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Standard deviation of the routing-matrix initialisation (variance 0.01).
pub const ROUTING_INIT_STD: f64 = 0.1;

/// How far gradients propagate through the routing iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingGradient {
    /// Logits and couplings are constants; only the final weighted sum is
    /// differentiated.
    #[default]
    FinalIteration,
    /// Differentiate through every agreement update.
    FullLoop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    Supervised,
    Unsupervised,
}

/// `W` of shape `(inputs, in_dim, outputs · out_dim)`.
pub fn init_routing_weight<T: Real>(
    rng: &mut ChaCha8Rng,
    inputs: usize,
    in_dim: usize,
    out_total: usize,
) -> Tensor<T> {
    normal_tensor(rng, &[inputs, in_dim, out_total], 0.0, ROUTING_INIT_STD)
}

/// Prediction vectors `û_{j|i} = W_i u_i`, shaped `(N, m, outputs, out_dim)`.
pub fn predict_vectors<T: Real>(tape: &mut Tape<T>, u: &CapsuleSet, weight: Var, outputs: usize) -> Result<Var> {
    let ws = tape.shape(weight).to_vec();
    let [m, in_dim, total] = ws[..] else {
        return Err(OpsError::Shape { op: "predict_vectors", detail: format!("weight must be 3-D, got {ws:?}") });
    };
    if m != u.count || in_dim != u.dim || outputs == 0 || total % outputs != 0 {
        return Err(OpsError::Shape {
            op: "predict_vectors",
            detail: format!(
                "capsules ({}, {}) vs weight {ws:?} with {outputs} outputs",
                u.count, u.dim
            ),
        });
    }
    let n = tape.shape(u.data)[0];
    let per_capsule = tape.permute(u.data, &[1, 0, 2])?;
    let mapped = tape.matmul(per_capsule, weight)?;
    let back = tape.permute(mapped, &[1, 0, 2])?;
    Ok(tape.reshape(back, &[n, m, outputs, total / outputs])?)
}

/// One routing iteration's state.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState<T> {
    pub iteration: usize,
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
    pub output: Tensor<T>,
}

struct Snapshots<'a, T>(Option<&'a mut Vec<RoutingState<T>>>);

impl<T: Real> Snapshots<'_, T> {
    fn record(&mut self, tape: &Tape<T>, iteration: usize, b: Var, c: Var, v: Var) {
        if let Some(out) = self.0.as_mut() {
            out.push(RoutingState {
                iteration,
                logits: tape.value(b).clone(),
                couplings: tape.value(c).clone(),
                output: tape.value(v).clone(),
            });
        }
    }
}

fn supervised_loop<T: Real>(
    tape: &mut Tape<T>,
    u_hat: Var,
    iterations: usize,
    grad: RoutingGradient,
    mut trace: Snapshots<'_, T>,
) -> Result<Var> {
    let shape = tape.shape(u_hat).to_vec();
    let [n, m, outputs, dim] = shape[..] else {
        return Err(OpsError::Shape { op: "route_supervised", detail: format!("û must be (N, m, n, d), got {shape:?}") });
    };
    if iterations == 0 {
        return Err(OpsError::NoIterations);
    }
    let frozen = match grad {
        RoutingGradient::FinalIteration => tape.detach(u_hat)?,
        RoutingGradient::FullLoop => u_hat,
    };
    let mut b = tape.constant(Tensor::zeros(&[n, m, outputs, 1]));
    let mut v = None;
    for it in 1..=iterations {
        let last = it == iterations;
        let src = if last { u_hat } else { frozen };
        let c = tape.softmax(b, 2)?;
        let weighted = tape.mul(c, src)?;
        let s = tape.sum_axis(weighted, 1, false)?;
        let out = squash(tape, s, 2)?;
        trace.record(tape, it, b, c, out);
        if !last {
            let vb = tape.reshape(out, &[n, 1, outputs, dim])?;
            let agree = tape.mul(frozen, vb)?;
            let agree = tape.sum_axis(agree, 3, true)?;
            b = tape.add(b, agree)?;
        }
        v = Some(out);
    }
    Ok(v.expect("at least one iteration"))
}

fn unsupervised_loop<T: Real>(
    tape: &mut Tape<T>,
    u_hat: Var,
    iterations: usize,
    grad: RoutingGradient,
    mut trace: Snapshots<'_, T>,
) -> Result<Var> {
    let shape = tape.shape(u_hat).to_vec();
    let [n, m, dim] = shape[..] else {
        return Err(OpsError::Shape { op: "route_unsupervised", detail: format!("û must be (N, m, d), got {shape:?}") });
    };
    if iterations == 0 {
        return Err(OpsError::NoIterations);
    }
    let frozen = match grad {
        RoutingGradient::FinalIteration => tape.detach(u_hat)?,
        RoutingGradient::FullLoop => u_hat,
    };
    let mut b = tape.constant(Tensor::zeros(&[n, m, 1]));
    let c = tape.softmax(b, 1)?;
    let weighted = tape.mul(c, frozen)?;
    let s = tape.sum_axis(weighted, 1, false)?;
    let mut v = squash(tape, s, 1)?;
    for it in 1..=iterations {
        let src = if it == iterations { u_hat } else { frozen };
        let vb = tape.reshape(v, &[n, 1, dim])?;
        let agree = tape.mul(frozen, vb)?;
        let agree = tape.sum_axis(agree, 2, true)?;
        b = tape.add(b, agree)?;
        let c = tape.softmax(b, 1)?;
        let weighted = tape.mul(c, src)?;
        let s = tape.sum_axis(weighted, 1, false)?;
        v = squash(tape, s, 1)?;
        trace.record(tape, it, b, c, v);
    }
    Ok(v)
}

/// Routes `û (N, m, n, d)` to `n` classified capsules of dimension `d`.
pub fn route_supervised<T: Real>(
    tape: &mut Tape<T>,
    u_hat: Var,
    iterations: usize,
    grad: RoutingGradient,
) -> Result<CapsuleSet> {
    let v = supervised_loop(tape, u_hat, iterations, grad, Snapshots(None))?;
    CapsuleSet::new(tape, v, CapsuleLevel::Classified)
}

/// Merges `û (N, m, d)` into one capsule; returned as `(N, 1, d)`.
pub fn route_unsupervised<T: Real>(
    tape: &mut Tape<T>,
    u_hat: Var,
    iterations: usize,
    grad: RoutingGradient,
) -> Result<CapsuleSet> {
    let v = unsupervised_loop(tape, u_hat, iterations, grad, Snapshots(None))?;
    let shape = tape.shape(v).to_vec();
    let v = tape.reshape(v, &[shape[0], 1, shape[1]])?;
    CapsuleSet::new(tape, v, CapsuleLevel::Classified)
}

/// Per-iteration states of a routing run over a fixed `û`. Nothing is
/// trainable, so no gradients are recorded.
pub fn routing_trace<T: Real>(u_hat: &Tensor<T>, iterations: usize, kind: RoutingKind) -> Result<Vec<RoutingState<T>>> {
    let mut tape = Tape::new();
    let u = tape.constant(u_hat.clone());
    let mut states = Vec::with_capacity(iterations);
    let snaps = Snapshots(Some(&mut states));
    match kind {
        RoutingKind::Supervised => supervised_loop(&mut tape, u, iterations, RoutingGradient::FullLoop, snaps)?,
        RoutingKind::Unsupervised => unsupervised_loop(&mut tape, u, iterations, RoutingGradient::FullLoop, snaps)?,
    };
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn caps(tape: &mut Tape<f64>, shape: &[usize], v: Vec<f64>) -> CapsuleSet {
        let d = tape.constant(Tensor::new(shape.to_vec(), v));
        CapsuleSet::new(tape, d, CapsuleLevel::Primary).unwrap()
    }

    #[test]
    fn identity_weights_replicate_inputs() {
        let mut tape = Tape::<f64>::new();
        let u = caps(&mut tape, &[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        // two outputs, each the identity map
        let mut w = vec![0.0; 2 * 2 * 4];
        for i in 0..2 {
            for out in 0..2 {
                for d in 0..2 {
                    w[(i * 2 + d) * 4 + out * 2 + d] = 1.0;
                }
            }
        }
        let w = tape.constant(Tensor::new(vec![2, 2, 4], w));
        let uh = predict_vectors(&mut tape, &u, w, 2).unwrap();
        assert_eq!(tape.shape(uh), &[1, 2, 2, 2]);
        assert_eq!(tape.value(uh).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn predict_matches_matrix_vector_loop() {
        let mut rng = SplitRng::new(3).stream(9);
        let w: Tensor<f64> = normal_tensor(&mut rng, &[1, 3, 4], 0.0, 1.0);
        let u: Tensor<f64> = normal_tensor(&mut rng, &[2, 1, 3], 0.0, 1.0);
        let mut tape = Tape::new();
        let uv = tape.constant(u.clone());
        let capsules = CapsuleSet::new(&tape, uv, CapsuleLevel::Primary).unwrap();
        let wv = tape.constant(w.clone());
        let uh = predict_vectors(&mut tape, &capsules, wv, 1).unwrap();
        for nidx in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| u.data()[nidx * 3 + k] * w.data()[k * 4 + j]).sum();
                assert!((tape.value(uh).data()[nidx * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_predictions() {
        let mut tape = Tape::<f64>::new();
        let u = caps(&mut tape, &[1, 3, 2], vec![0.0; 6]);
        let w = tape.constant(Tensor::full(&[3, 2, 4], 0.7));
        let uh = predict_vectors(&mut tape, &u, w, 2).unwrap();
        assert!(tape.value(uh).data().iter().all(|&x| x == 0.0));
        let bad = tape.constant(Tensor::zeros(&[4, 2, 4]));
        assert!(predict_vectors(&mut tape, &u, bad, 2).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut tape = Tape::<f64>::new();
        let uh = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert_eq!(route_supervised(&mut tape, uh, 0, RoutingGradient::default()).unwrap_err(), OpsError::NoIterations);
        let uh = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert_eq!(route_unsupervised(&mut tape, uh, 0, RoutingGradient::default()).unwrap_err(), OpsError::NoIterations);
    }

    #[test]
    fn trace_has_one_state_per_iteration() {
        let mut rng = SplitRng::new(5).stream(1);
        let uh: Tensor<f64> = normal_tensor(&mut rng, &[2, 4, 3, 2], 0.0, 1.0);
        let states = routing_trace(&uh, 3, RoutingKind::Supervised).unwrap();
        assert_eq!(states.len(), 3);
        let last = &states[2];
        for row in last.couplings.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let single: Tensor<f64> = normal_tensor(&mut rng, &[1, 1, 4], 0.0, 1.0);
        for s in routing_trace(&single, 4, RoutingKind::Unsupervised).unwrap() {
            assert_eq!(s.couplings.data(), &[1.0]);
        }
    }
}
