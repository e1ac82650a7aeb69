//! Attention pooling across diffusion timesteps.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Shared scoring parameters: `u_t = W_a·h_t + b_a`, logit `q·u_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttnParams {
    pub w_a: Tensor,
    pub b_a: Tensor,
    pub q: Tensor,
}

impl TemporalAttnParams {
    pub fn init(embed_dim: usize, attn_dim: usize, seed: u64) -> Result<Self> {
        if attn_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        let mut r = rng::stream(seed, &[rng::tag("temporal-init")]);
        let bw = (3.0 / embed_dim as f64).sqrt();
        let bq = (3.0 / attn_dim as f64).sqrt();
        Ok(TemporalAttnParams {
            w_a: Tensor::from_parts(
                vec![attn_dim, embed_dim],
                (0..attn_dim * embed_dim).map(|_| r.random_range(-bw..bw)).collect(),
            ),
            b_a: Tensor::zeros(&[attn_dim]),
            q: Tensor::from_parts(vec![attn_dim], (0..attn_dim).map(|_| r.random_range(-bq..bq)).collect()),
        })
    }

    pub fn attn_dim(&self) -> usize {
        self.q.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_a.shape()[1]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("temporal.w_a".into(), &self.w_a),
            ("temporal.b_a".into(), &self.b_a),
            ("temporal.q".into(), &self.q),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_a, &mut self.b_a, &mut self.q]
    }

    /// Timestep logits `q·(W_a h + b_a)` for each embedding.
    pub fn logits(&self, h_list: &[Embedding]) -> Result<Vec<f64>> {
        let d = self.embed_dim();
        let a = self.attn_dim();
        h_list
            .iter()
            .map(|h| {
                if h.dim() != d {
                    return Err(Error::Shape(format!("embedding has dim {}, expected {d}", h.dim())));
                }
                Ok((0..a)
                    .map(|j| {
                        let row = &self.w_a.data()[j * d..(j + 1) * d];
                        let u = row.iter().zip(h.values()).map(|(w, x)| w * x).sum::<f64>() + self.b_a.data()[j];
                        self.q.data()[j] * u
                    })
                    .sum())
            })
            .collect()
    }

    /// Adds attention pooling to `g`. `vars` follow [`TemporalAttnParams::tensors`];
    /// `h` is (B·T, D) with timesteps fastest. Returns `(weights (B, T), pooled (B, D))`.
    pub fn build(&self, g: &mut Graph, vars: &[Var], h: Var, batch: usize, steps: usize) -> (Var, Var) {
        let u = g.linear(h, vars[0], Some(vars[1]));
        let logits = g.row_dot(u, vars[2]);
        let logits = g.reshape(logits, vec![batch, steps]);
        let a = g.softmax_rows(logits);
        let pooled = g.attn_pool(a, h);
        (a, pooled)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn attn_weights(params: &TemporalAttnParams, h_list: &[Embedding]) -> Result<Vec<f64>> {
    if h_list.is_empty() {
        return Err(Error::Data("attention over an empty timestep list".into()));
    }
    Ok(softmax(&params.logits(h_list)?))
}

/// Convex combination `Σ_t a_t h_t`.
pub fn pool(h_list: &[Embedding], a: &[f64]) -> Result<Embedding> {
    if h_list.len() != a.len() {
        return Err(Error::Shape(format!("{} weights for {} embeddings", a.len(), h_list.len())));
    }
    let d = h_list.first().map(|h| h.dim()).ok_or_else(|| Error::Data("pooling nothing".into()))?;
    if h_list.iter().any(|h| h.dim() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let mut out = vec![0.0; d];
    for (h, &w) in h_list.iter().zip(a) {
        out.iter_mut().zip(h.values()).for_each(|(o, v)| *o += w * v);
    }
    Ok(Embedding(out))
}
