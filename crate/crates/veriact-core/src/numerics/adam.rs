use alloc::vec::Vec;

use super::{ParamSet, Tensor};

/// Per-parameter first/second moment state, aligned with the param set.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(ps: &ParamSet) -> Self {
        let m = ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { t: 0, m, v }
    }
}

/// Standard bias-corrected Adam update from the gradients currently stored in
/// the param set. Deterministic given identical inputs.
pub fn adam_step(
    ps: &mut ParamSet,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - libm::pow(beta1, t);
    let bc2 = 1.0 - libm::pow(beta2, t);
    for (idx, p) in ps.iter_mut().enumerate() {
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let g = p.grad.data();
        let val = p.value.data_mut();
        for i in 0..val.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            val[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
        }
    }
}
