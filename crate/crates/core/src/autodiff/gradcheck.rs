//! Finite-difference check of tape gradients (five-point central stencil,
//! truncation error O(h⁴)).

use super::{AutodiffError, Result, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub passed: bool,
}

fn evaluate<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(AutodiffError::NotScalar(v.shape().to_vec()));
    }
    let out = v.item();
    if !out.is_finite() {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    Ok(out)
}

/// Checks gradients of a scalar function of several inputs.
pub fn grad_check_inputs<F>(f: F, xs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if xs.iter().any(|x| !x.all_finite()) {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    if !tape.value(y).all_finite() {
        return Err(AutodiffError::NonFinite { op: "grad_check" });
    }
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut numeric = Vec::with_capacity(xs.len());
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for input in 0..xs.len() {
        let mut col = Vec::with_capacity(xs[input].len());
        for k in 0..xs[input].len() {
            let orig = xs[input].data()[k];
            let mut at = |offset: f64| {
                probe[input].data_mut()[k] = orig + offset;
                evaluate(&f, &probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            probe[input].data_mut()[k] = orig;
            col.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
        }
        numeric.push(col);
    }

    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (k, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let denom = av.abs().max(nv.abs()).max(1e-8);
            let rel = (av - nv).abs() / denom;
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = rel.max(max_rel_error);
                worst = Some((i, k));
            }
        }
    }
    Ok(GradCheckReport { max_rel_error, worst, analytic, numeric, passed: max_rel_error <= tol })
}

/// Checks the gradient of a scalar function of one input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let x = Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]);
        let report = grad_check(
            |tape, _x| Ok(tape.constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.analytic[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l2norm_gradient_matches_unit_direction() {
        let x = Tensor::from_f64(&[2], &[3.0, 4.0]);
        let report = grad_check(|tape, x| tape.l2norm(x, 0, false), &x, 1e-5, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
        assert!((report.analytic[0][0] - 0.6).abs() < 1e-12);
        assert!((report.analytic[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let x = Tensor::from_f64(&[1], &[-1.0]);
        let err = grad_check(|tape, x| tape.log(x), &x, 1e-5, 1e-5).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { .. }));
    }
}
