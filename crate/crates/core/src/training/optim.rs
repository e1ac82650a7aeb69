//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One update. `decay[i]` selects which tensors receive weight decay.
///
/// `p ← p·(1 − lr·λ)` then `p ← p − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape("optimizer inputs disagree in tensor count".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!("tensor {i}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..n {
        let shrink = if decay[i] { 1.0 - hyper.lr * hyper.weight_decay } else { 1.0 };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        }
        let v = state.v[i].data_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((p, m), v) in params[i].data_mut().iter_mut().zip(m).zip(v) {
            *p *= shrink;
            *p -= hyper.lr * (m / bc1) / ((v / bc2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}
