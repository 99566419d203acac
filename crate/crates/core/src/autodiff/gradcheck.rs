//! Finite-difference verification of tape gradients.
//!
//! The forward function is re-run from scratch for every perturbed
//! coordinate, so anything stateful the function touches (batch-norm running
//! statistics, for instance) must be cloned inside the closure.

use super::tape::{Tape, TapeId};
use super::tensor::Parameter;
use crate::{Error, Result};

/// Relative error with an absolute floor: |a - b| / max(|a|, |b|, floor).
/// Below the floor the comparison degrades to an absolute one, which is the
/// honest regime once gradients sink under the finite-difference noise
/// level (roundoff in the loss divided by 2 eps, around 1e-9 for a loss of
/// order one at eps 1e-5). Two exact zeros compare as zero error.
pub fn rel_err_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Relative error with the tight 1e-8 floor used for single-op checks,
/// whose probe losses keep every gradient well above noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floored(a, b, 1e-8)
}

/// Largest elementwise relative error between two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of a flat parameter
/// vector: (f(p + eps) - f(p - eps)) / (2 eps), one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut p = point.to_vec();
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let hi = f(&p)?;
        p[i] = orig - eps;
        let lo = f(&p)?;
        p[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "finite differences hit a non-finite value at coordinate {i}"
            )));
        }
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Check the tape gradient of `f` against central finite differences over
/// every coordinate of every parameter. `f` receives a fresh tape and the
/// leaf ids of the (possibly perturbed) parameters, in order, and must return
/// a scalar loss node. Returns the maximum relative error with the tight
/// single-op floor.
pub fn grad_check<F>(f: F, params: &[Parameter], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TapeId]) -> Result<TapeId>,
{
    grad_check_with_floor(f, params, eps, 1e-8)
}

/// [`grad_check`] with an explicit magnitude floor for the error metric.
/// Deep composites can drive true gradients arbitrarily close to zero (a
/// BatchNorm over two values makes its input nearly irrelevant, for one);
/// below the floor the check asserts absolute closeness at floor times the
/// tolerance instead of a meaningless quotient of noise terms.
pub fn grad_check_with_floor<F>(f: F, params: &[Parameter], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TapeId]) -> Result<TapeId>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidHyperparameter(format!("grad_check: eps must be > 0, got {eps}")));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "grad_check: floor must be > 0, got {floor}"
        )));
    }
    let run = |ps: &[Parameter], want_grads: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<TapeId> = ps.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NumericalFailure(format!("grad_check: loss is {v}")));
        }
        if !want_grads {
            return Ok((v, None));
        }
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| Ok(tape.grad_or_zeros(id)?.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((v, Some(grads)))
    };

    let (_, analytic) = run(params, true)?;
    let analytic = analytic.unwrap();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Parameter> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.value.numel() {
            let orig = param.value.data()[ci];
            perturbed[pi].value.data_mut()[ci] = orig + eps;
            let (hi, _) = run(&perturbed, false)?;
            perturbed[pi].value.data_mut()[ci] = orig - eps;
            let (lo, _) = run(&perturbed, false)?;
            perturbed[pi].value.data_mut()[ci] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            worst = worst.max(rel_err_floored(analytic[pi][ci], numeric, floor));
        }
    }
    Ok(worst)
}
