//! Central finite-difference gradient checking.
//!
//! The checker only drives the forward path: it perturbs each parameter
//! element by ±h and differences the scalar loss, staying independent of
//! the analytic backward pass it is used to verify.

use crate::tensor::{ParamId, ParamSet, Tensor};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-4;
/// Absolute floor below which central differences are dominated by
/// truncation noise (h^2 times local curvature); elements this small are
/// screened before the relative comparison.
pub const DEFAULT_ATOL: f64 = 1e-6;

/// Numeric gradient of `loss_fn` w.r.t. every element of every parameter.
pub fn central_diff<F>(params: &ParamSet, h: f64, mut loss_fn: F) -> Vec<Tensor>
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut work = params.clone();
    let mut out = params.zeros_like();
    for pid in 0..params.len() {
        for j in 0..params.get(ParamId(pid)).numel() {
            let orig = work.get(ParamId(pid)).data()[j];
            work.get_mut(ParamId(pid)).data_mut()[j] = orig + h;
            let fp = loss_fn(&work);
            work.get_mut(ParamId(pid)).data_mut()[j] = orig - h;
            let fm = loss_fn(&work);
            work.get_mut(ParamId(pid)).data_mut()[j] = orig;
            out[pid].data_mut()[j] = (fp - fm) / (2.0 * h);
        }
    }
    out
}

/// Worst elementwise discrepancy between analytic and numeric gradients.
/// An element passes if |a - n| < atol or |a - n| / max(|a|, |n|) < rtol;
/// the returned value is the max over elements of the effective relative
/// error (0 for elements passing on atol).
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor], atol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (av, nv) in a.data().iter().zip(n.data().iter()) {
            let diff = (av - nv).abs();
            if diff < atol {
                continue;
            }
            let rel = diff / av.abs().max(nv.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

/// Run a full check: analytic gradients must match central differences
/// within (rtol, atol). Returns the observed worst relative error.
pub fn check<F>(
    params: &ParamSet,
    analytic: &[Tensor],
    loss_fn: F,
) -> f64
where
    F: FnMut(&ParamSet) -> f64,
{
    let numeric = central_diff(params, DEFAULT_H, loss_fn);
    max_rel_err(analytic, &numeric, DEFAULT_ATOL)
}
