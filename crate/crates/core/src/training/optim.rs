use alloc::vec;
use alloc::vec::Vec;

use crate::error::{AmesError, Result};
use crate::model::AmesParams;

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First and second moments over the flattened parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied so far (for bias correction).
    pub updates: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], updates: 0 }
    }

    pub fn for_params(p: &AmesParams) -> Self {
        Self::new(p.num_parameters())
    }
}

/// `lr0 · ½(1 + cos(π t / T))`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total)) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// One decoupled-weight-decay Adam update on flat slices.
pub fn adamw_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamWConfig) {
    state.updates += 1;
    let t = state.updates as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * cfg.weight_decay * params[i];
        params[i] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
}

/// AdamW step with the cosine schedule evaluated at `step` of `total`.
pub fn optimizer_step(
    params: &mut AmesParams,
    grads: &AmesParams,
    state: &mut AdamState,
    step: usize,
    total: usize,
    lr0: f64,
    cfg: &AdamWConfig,
) -> Result<f64> {
    let mut flat = params.to_flat();
    let g = grads.to_flat();
    if g.len() != flat.len() || state.m.len() != flat.len() {
        return Err(AmesError::Shape { what: "optimizer state", expected: flat.len(), got: state.m.len() });
    }
    let lr = cosine_lr(lr0, step, total);
    adamw_update(&mut flat, &g, state, lr, cfg);
    params.load_flat(&flat)?;
    Ok(lr)
}
