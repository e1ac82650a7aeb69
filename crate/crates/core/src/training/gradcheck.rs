//! Finite-difference audit of the analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Initial step of the fourth-order central stencil.
pub const FD_STEP: f64 = 1e-4;
const MAX_HALVINGS: usize = 12;
const SETTLE_TOL: f64 = 1e-6;
/// Roughly the stencil's roundoff at the initial step.
const SETTLE_ABS: f64 = 1e-10;
/// Denominator floor so exactly-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares every coordinate (or the first `limit` per tensor) of the loss
/// gradient on `(x, labels)` against `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12h`.
pub fn gradient_check(model: &Model, x: &Tensor, labels: &[usize], limit: Option<usize>) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(x.clone(), labels)?;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut probe = model.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let n = grads[ti].len().min(limit.unwrap_or(usize::MAX));
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let orig = probe.tensors()[ti].1.data()[k];
            let mut at = |delta: f64| -> Result<f64> {
                probe.tensors_mut()[ti].data_mut()[k] = orig + delta;
                probe.loss(x, labels)
            };
            let mut stencil = |h: f64| -> Result<f64> { Ok((8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)) };
            // A rectifier kink within 2h of the point spoils the stencil; halve
            // the step until two successive estimates agree. If they never do,
            // keep the best-agreeing pair rather than the roundoff-dominated last one.
            let mut h = FD_STEP;
            let mut prev = stencil(h)?;
            let (mut numeric, mut best_gap) = (prev, f64::INFINITY);
            for _ in 0..MAX_HALVINGS {
                h /= 2.0;
                let finer = stencil(h)?;
                let gap = (prev - finer).abs();
                if gap < best_gap {
                    best_gap = gap;
                    numeric = finer;
                }
                if gap <= SETTLE_TOL * prev.abs().max(finer.abs()) + SETTLE_ABS {
                    break;
                }
                prev = finer;
            }
            probe.tensors_mut()[ti].data_mut()[k] = orig;
            worst = worst.max(rel_err(grads[ti].data()[k], numeric));
        }
        tensors.push(TensorCheck {
            name,
            checked: n,
            max_rel_err: worst,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_err })
}
