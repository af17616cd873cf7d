//! AdamW optimizer with bias correction. Weight decay defaults to zero.

use super::{Gradients, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates plus the step counter. Must start zeroed.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW step. `lrs` gives a per-parameter learning rate; an lr of 0
/// leaves that parameter's bytes untouched (decoupled decay scales by lr
/// too), which is how phase-2 freezing works.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lrs: &[f64],
    cfg: &AdamConfig,
) {
    assert_eq!(lrs.len(), params.len());
    assert_eq!(grads.by_param.len(), params.len());
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for pid in 0..params.len() {
        let lr = lrs[pid];
        if lr == 0.0 {
            continue;
        }
        let g = grads.by_param[pid].data();
        let m = state.m[pid].data_mut();
        let v = state.v[pid].data_mut();
        let p = params.get_mut(crate::tensor::ParamId(pid)).data_mut();
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn single_param(v: f64) -> (ParamSet, AdamState) {
        let mut params = ParamSet::new();
        params.register("x", Tensor::scalar(v));
        let state = AdamState::new(&params);
        (params, state)
    }

    #[test]
    fn first_step_is_signed_lr_as_eps_vanishes() {
        // Bias-corrected m-hat equals g on step 1, so the update is
        // -lr * g/|g| in the eps -> 0 limit.
        for &g in &[0.37, -2.5, 10.0] {
            let (mut params, mut state) = single_param(1.0);
            let grads = Gradients { by_param: vec![Tensor::scalar(g)] };
            let cfg = AdamConfig { eps: 1e-14, ..AdamConfig::default() };
            adam_step(&mut params, &grads, &mut state, &[0.01], &cfg);
            let step = 1.0 - params.get(ParamId(0)).item();
            assert!((step - 0.01 * g.signum()).abs() < 1e-8, "g={g} step={step}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut params, mut state) = single_param(3.25);
        let grads = Gradients { by_param: vec![Tensor::scalar(0.0)] };
        let cfg = AdamConfig::default();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, &[0.01], &cfg);
        }
        assert_eq!(params.get(ParamId(0)).item(), 3.25);
    }

    #[test]
    fn zero_lr_freezes_bytes_and_state() {
        let (mut params, mut state) = single_param(1.5);
        let grads = Gradients { by_param: vec![Tensor::scalar(2.0)] };
        let cfg = AdamConfig::default();
        adam_step(&mut params, &grads, &mut state, &[0.0], &cfg);
        assert_eq!(params.get(ParamId(0)).item().to_bits(), 1.5f64.to_bits());
        assert_eq!(state.m[0].item(), 0.0);
    }

    #[test]
    fn quadratic_converges_within_pinned_budget() {
        // min (x-3)^2 from x=0, lr 1e-2: |x-3| < 1e-6 within 2000 steps.
        let (mut params, mut state) = single_param(0.0);
        let cfg = AdamConfig::default();
        let mut converged_at = None;
        for step in 1..=2000 {
            let x = params.get(ParamId(0)).item();
            let grads = Gradients { by_param: vec![Tensor::scalar(2.0 * (x - 3.0))] };
            adam_step(&mut params, &grads, &mut state, &[1e-2], &cfg);
            if (params.get(ParamId(0)).item() - 3.0).abs() < 1e-6 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "did not converge in 2000 steps");
    }
}
