//! Gated prototype attribution head and the plain linear ablation head.
//!
//! For a pooled embedding `h`, the gate `w = logistic(A·h + b)` weights the
//! squared distance to every prototype, a temperature LogSumExp turns each
//! class's prototype distances into a soft-minimum `s_c`, and the class
//! posterior is a softmax over `-s_c` so that the nearest class wins.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateKind {
    /// `w = logistic(A·h + b)`
    Linear,
    /// `w = logistic(A2·relu(A1·h + b1) + b2)`
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateParams {
    Linear { a: Tensor, b: Tensor },
    Mlp { a1: Tensor, b1: Tensor, a2: Tensor, b2: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// (C, M, D)
    pub prototypes: Tensor,
    pub gate: GateParams,
    /// Unconstrained temperature; `tau = exp(log_tau)`.
    pub log_tau: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    /// Soft-minimum distance per class.
    pub scores: Vec<f64>,
    pub posteriors: Vec<f64>,
    pub gate: Vec<f64>,
    /// (C, M) gated distances.
    pub distances: Vec<Vec<f64>>,
    /// (C, M) prototype responsibilities.
    pub responsibilities: Vec<Vec<f64>>,
    /// (C, M, D) per-feature distance contributions.
    pub feature_contributions: Option<Tensor>,
}

impl AttributionResult {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.posteriors)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn uniform(shape: &[usize], bound: f64, r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r.random_range(-bound..bound)).collect())
}

impl HeadParams {
    pub fn init(
        num_classes: usize,
        per_class: usize,
        dim: usize,
        gate: &GateKind,
        tau_init: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if per_class == 0 {
            return Err(Error::Config("need at least one prototype per class".into()));
        }
        if !(tau_init > 0.0 && tau_init.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        let mut r = rng::stream(seed, &[rng::tag("head-init")]);
        let n = num_classes * per_class * dim;
        let prototypes = Tensor::from_parts(
            vec![num_classes, per_class, dim],
            (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut r); 0.1 * z }).collect(),
        );
        let bound = 0.5 / (dim as f64).sqrt();
        let gate = match gate {
            GateKind::Linear => GateParams::Linear {
                a: uniform(&[dim, dim], bound, &mut r),
                b: Tensor::zeros(&[dim]),
            },
            GateKind::Mlp { hidden } => {
                if *hidden == 0 {
                    return Err(Error::Config("gate hidden width must be positive".into()));
                }
                GateParams::Mlp {
                    a1: uniform(&[*hidden, dim], (3.0 / dim as f64).sqrt(), &mut r),
                    b1: Tensor::zeros(&[*hidden]),
                    a2: uniform(&[dim, *hidden], 0.5 / (*hidden as f64).sqrt(), &mut r),
                    b2: Tensor::zeros(&[dim]),
                }
            }
        };
        Ok(HeadParams {
            prototypes,
            gate,
            log_tau: Tensor::scalar(tau_init.ln()),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn per_class(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[2]
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    pub fn prototype(&self, c: usize, m: usize) -> &[f64] {
        let d = self.dim();
        let start = (c * self.per_class() + m) * d;
        &self.prototypes.data()[start..start + d]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("head.prototypes".to_string(), &self.prototypes)];
        match &self.gate {
            GateParams::Linear { a, b } => {
                out.push(("head.gate.a".into(), a));
                out.push(("head.gate.b".into(), b));
            }
            GateParams::Mlp { a1, b1, a2, b2 } => {
                out.push(("head.gate.a1".into(), a1));
                out.push(("head.gate.b1".into(), b1));
                out.push(("head.gate.a2".into(), a2));
                out.push(("head.gate.b2".into(), b2));
            }
        }
        out.push(("head.log_tau".into(), &self.log_tau));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.prototypes];
        match &mut self.gate {
            GateParams::Linear { a, b } => {
                out.push(a);
                out.push(b);
            }
            GateParams::Mlp { a1, b1, a2, b2 } => {
                out.extend([a1, b1, a2, b2]);
            }
        }
        out.push(&mut self.log_tau);
        out
    }

    /// Adds the gate to `g`; `vars` are the gate slice of [`HeadParams::tensors`].
    fn build_gate(&self, g: &mut Graph, vars: &[Var], pooled: Var) -> Var {
        match self.gate {
            GateParams::Linear { .. } => {
                let z = g.linear(pooled, vars[0], Some(vars[1]));
                g.sigmoid(z)
            }
            GateParams::Mlp { .. } => {
                let z1 = g.linear(pooled, vars[0], Some(vars[1]));
                let r = g.relu(z1);
                let z2 = g.linear(r, vars[2], Some(vars[3]));
                g.sigmoid(z2)
            }
        }
    }

    /// Adds the head to `g`. Returns `(gate (B, D), distances (B, C·M), logits (B, C))`
    /// where `logits = -s_c = tau·LSE_m(-d/tau)`.
    pub fn build(&self, g: &mut Graph, vars: &[Var], pooled: Var) -> (Var, Var, Var) {
        let n = vars.len();
        let w = self.build_gate(g, &vars[1..n - 1], pooled);
        let d = g.gated_sq_dist(pooled, w, vars[0]);
        let tau = g.exp(vars[n - 1]);
        let neg = g.scale(d, -1.0);
        let scaled = g.div_scalar(neg, tau);
        let l = g.group_lse(scaled, self.per_class());
        let logits = g.mul_scalar(l, tau);
        (w, d, logits)
    }
}

impl LinearHeadParams {
    pub fn init(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut r = rng::stream(seed, &[rng::tag("linear-head-init")]);
        Ok(LinearHeadParams {
            weight: uniform(&[num_classes, dim], 1.0 / (dim as f64).sqrt(), &mut r),
            bias: Tensor::zeros(&[num_classes]),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("head.linear.weight".into(), &self.weight), ("head.linear.bias".into(), &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let d = h.len();
        self.weight
            .data()
            .chunks(d)
            .zip(self.bias.data())
            .map(|(row, b)| row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let i = x.len();
    w.data()
        .chunks(i)
        .zip(b.data())
        .map(|(row, bias)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bias)
        .collect()
}

pub fn gate(params: &HeadParams, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != params.dim() {
        return Err(Error::Shape(format!("embedding dim {} vs head dim {}", h.len(), params.dim())));
    }
    let z = match &params.gate {
        GateParams::Linear { a, b } => affine(a, b, h),
        GateParams::Mlp { a1, b1, a2, b2 } => {
            let hidden: Vec<f64> = affine(a1, b1, h).into_iter().map(|v| v.max(0.0)).collect();
            affine(a2, b2, &hidden)
        }
    };
    Ok(z.into_iter().map(logistic).collect())
}

pub fn weighted_distance(h: &[f64], w: &[f64], p: &[f64]) -> Result<f64> {
    if h.len() != w.len() || h.len() != p.len() {
        return Err(Error::Shape(format!(
            "lengths differ: embedding {}, gate {}, prototype {}",
            h.len(),
            w.len(),
            p.len()
        )));
    }
    Ok(h.iter().zip(w).zip(p).map(|((x, wi), pi)| wi * (x - pi) * (x - pi)).sum())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {tau}")))
    }
}

/// `-tau·log Σ_m exp(-d_m/tau)` in max-shifted form.
pub fn class_score(distances: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let dmin = distances
        .iter()
        .cloned()
        .reduce(f64::min)
        .ok_or_else(|| Error::Data("no prototype distances".into()))?;
    let sum: f64 = distances.iter().map(|d| (-(d - dmin) / tau).exp()).sum();
    Ok(dmin - tau * sum.ln())
}

/// Softmax of class logits.
pub fn posteriors(logits: &[f64]) -> Vec<f64> {
    crate::temporal::softmax(logits)
}

pub fn responsibilities(distances: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if distances.is_empty() {
        return Err(Error::Data("no prototype distances".into()));
    }
    let neg: Vec<f64> = distances.iter().map(|d| -d / tau).collect();
    Ok(crate::temporal::softmax(&neg))
}

/// `r[c,m,i] = w_i·(h_i − p[c,m,i])²`
pub fn feature_contributions(h: &[f64], w: &[f64], prototypes: &Tensor) -> Result<Tensor> {
    let s = prototypes.shape();
    if s.len() != 3 || s[2] != h.len() || w.len() != h.len() {
        return Err(Error::Shape(format!(
            "prototypes {:?} incompatible with embedding {} and gate {}",
            s,
            h.len(),
            w.len()
        )));
    }
    let d = h.len();
    let data = prototypes
        .data()
        .chunks(d)
        .flat_map(|p| (0..d).map(move |i| w[i] * (h[i] - p[i]) * (h[i] - p[i])))
        .collect();
    Tensor::new(s.to_vec(), data)
}

pub fn forward_head(params: &HeadParams, h: &[f64]) -> Result<AttributionResult> {
    let w = gate(params, h)?;
    let tau = params.tau();
    let (c, m) = (params.num_classes(), params.per_class());
    let mut distances = Vec::with_capacity(c);
    let mut scores = Vec::with_capacity(c);
    let mut resp = Vec::with_capacity(c);
    for ci in 0..c {
        let row = (0..m)
            .map(|mi| weighted_distance(h, &w, params.prototype(ci, mi)))
            .collect::<Result<Vec<f64>>>()?;
        scores.push(class_score(&row, tau)?);
        resp.push(responsibilities(&row, tau)?);
        distances.push(row);
    }
    let logits: Vec<f64> = scores.iter().map(|s| -s).collect();
    let contributions = feature_contributions(h, &w, &params.prototypes)?;
    Ok(AttributionResult {
        posteriors: posteriors(&logits),
        scores,
        gate: w,
        distances,
        responsibilities: resp,
        feature_contributions: Some(contributions),
    })
}
