//! Full attribution model: encoder → temporal attention → head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{init_encoder, EncoderConfig, EncoderParams, InitMode};
use crate::error::{Error, Result};
use crate::leaksim::{Dataset, SampleRecord};
use crate::head::{self, GateKind, HeadParams, LinearHeadParams};
use crate::schedule::{build_sequence, validate_timesteps, LatentSequence, LatentTensor, ScheduleConfig, LATENT_LEN, LATENT_SHAPE};
use crate::temporal::TemporalAttnParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadConfig {
    Prototype {
        prototypes_per_class: usize,
        gate: GateKind,
        tau_init: f64,
    },
    /// Plain affine classifier on the pooled embedding (prototype ablation).
    Linear,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::Prototype {
            prototypes_per_class: 4,
            gate: GateKind::Linear,
            tau_init: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the temporal attention projection; defaults to the embedding width.
    pub attn_dim: Option<usize>,
    pub num_classes: usize,
    pub head: HeadConfig,
    pub timesteps: Vec<usize>,
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(crate::leaksim::GenConfig::default().closed_classes)
    }
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            attn_dim: None,
            num_classes,
            head: HeadConfig::default(),
            timesteps: crate::schedule::DEFAULT_TIMESTEPS.to_vec(),
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.schedule.validate()?;
        validate_timesteps(&self.timesteps, &self.schedule)?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.attn_dim == Some(0) {
            return Err(Error::Config("attn_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Prototype(HeadParams),
    Linear(LinearHeadParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub temporal: TemporalAttnParams,
    pub head: Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Learned temporal attention.
    Attention,
    /// Arithmetic mean over timesteps.
    Uniform,
}

/// Graph handles for one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// (B·T, D)
    pub steps: Var,
    /// (B, T)
    pub attn: Var,
    /// (B, D)
    pub pooled: Var,
    /// (B, D), prototype head only
    pub gate: Option<Var>,
    /// (B, C·M), prototype head only
    pub distances: Option<Var>,
    /// (B, C)
    pub logits: Var,
}

/// Per-sample inference outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub step_embeddings: Vec<Vec<f64>>,
    pub attn: Vec<f64>,
    pub pooled: Vec<f64>,
    pub gate: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl SampleOutput {
    pub fn posteriors(&self) -> Vec<f64> {
        head::posteriors(&self.logits)
    }

    /// Pooled embedding multiplied by the feature gate when the head has one.
    pub fn gated(&self) -> Vec<f64> {
        match &self.gate {
            Some(w) => self.pooled.iter().zip(w).map(|(h, w)| h * w).collect(),
            None => self.pooled.clone(),
        }
    }
}

const INFER_CHUNK: usize = 48;

pub fn noise_seed(r: &SampleRecord) -> u64 {
    crate::rng::derive_seed(r.seed, &[crate::rng::tag("diffusion")])
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.encoder.init_seed;
        let encoder = init_encoder(&config.encoder, InitMode::Random)?;
        let d = config.encoder.embed_dim;
        let temporal = TemporalAttnParams::init(d, config.attn_dim.unwrap_or(d), seed)?;
        let head = match &config.head {
            HeadConfig::Prototype {
                prototypes_per_class,
                gate,
                tau_init,
            } => Head::Prototype(HeadParams::init(
                config.num_classes,
                *prototypes_per_class,
                d,
                gate,
                *tau_init,
                seed,
            )?),
            HeadConfig::Linear => Head::Linear(LinearHeadParams::init(config.num_classes, d, seed)?),
        };
        Ok(Model {
            config,
            encoder,
            temporal,
            head,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.encoder.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn prototype_head(&self) -> Option<&HeadParams> {
        match &self.head {
            Head::Prototype(h) => Some(h),
            Head::Linear(_) => None,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.tensors();
        out.extend(self.temporal.tensors());
        match &self.head {
            Head::Prototype(h) => out.extend(h.tensors()),
            Head::Linear(h) => out.extend(h.tensors()),
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.temporal.tensors_mut());
        match &mut self.head {
            Head::Prototype(h) => out.extend(h.tensors_mut()),
            Head::Linear(h) => out.extend(h.tensors_mut()),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Noised and normalized latent stack for one sample.
    pub fn sequence(&self, z0: &LatentTensor, noise_seed: u64) -> Result<LatentSequence> {
        build_sequence(z0, &self.config.schedule, &self.config.timesteps, noise_seed)
    }

    /// Sequences for dataset records; diffusion noise is keyed by each record's seed.
    pub fn record_sequences(&self, ds: &Dataset, records: &[&SampleRecord]) -> Result<Vec<LatentSequence>> {
        records.iter().map(|r| self.sequence(ds.latent(r), noise_seed(r))).collect()
    }

    /// Stacks sequences into a (B·T, 4, 32, 32) batch, timesteps fastest.
    pub fn batch_input(&self, seqs: &[&LatentSequence]) -> Result<Tensor> {
        let t = self.config.steps();
        let mut data = Vec::with_capacity(seqs.len() * t * LATENT_LEN);
        for s in seqs {
            if s.latents.len() != t || s.timesteps != self.config.timesteps {
                return Err(Error::Shape(format!(
                    "sequence timesteps {:?} do not match model timesteps {:?}",
                    s.timesteps, self.config.timesteps
                )));
            }
            for l in &s.latents {
                data.extend_from_slice(l.data());
            }
        }
        let mut shape = vec![seqs.len() * t];
        shape.extend_from_slice(&LATENT_SHAPE);
        Tensor::new(shape, data)
    }

    /// Adds the model to `g`. `vars` follow [`Model::tensors`].
    pub fn build(&self, g: &mut Graph, vars: &[Var], x: Var, pooling: Pooling) -> ForwardVars {
        let t = self.config.steps();
        let batch = g.value(x).shape()[0] / t;
        let ne = self.encoder.tensors().len();
        let steps = self.encoder.build(g, &vars[..ne], x, self.config.encoder.input_rms_norm);
        let (attn, pooled) = match pooling {
            Pooling::Attention => self.temporal.build(g, &vars[ne..ne + 3], steps, batch, t),
            Pooling::Uniform => {
                let a = g.input(Tensor::filled(&[batch, t], 1.0 / t as f64));
                let p = g.attn_pool(a, steps);
                (a, p)
            }
        };
        let hv = &vars[ne + 3..];
        match &self.head {
            Head::Prototype(h) => {
                let (w, d, logits) = h.build(g, hv, pooled);
                ForwardVars {
                    steps,
                    attn,
                    pooled,
                    gate: Some(w),
                    distances: Some(d),
                    logits,
                }
            }
            Head::Linear(_) => {
                let logits = g.linear(pooled, hv[0], Some(hv[1]));
                ForwardVars {
                    steps,
                    attn,
                    pooled,
                    gate: None,
                    distances: None,
                    logits,
                }
            }
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Mean cross-entropy over the batch, forward only.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        self.check_labels(labels)?;
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let xv = g.input(x.clone());
        let fv = self.build(&mut g, &vars, xv, Pooling::Attention);
        let loss = g.cross_entropy(fv.logits, labels);
        Ok(g.value(loss).data()[0])
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::Data(format!("label {bad} out of range for {} classes", self.num_classes())));
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch and its gradient for every tensor, in [`Model::tensors`] order.
    pub fn loss_and_grads(&self, x: Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        self.check_labels(labels)?;
        let mut g = Graph::new();
        let vars = self.register(&mut g, true);
        let xv = g.input(x);
        let fv = self.build(&mut g, &vars, xv, Pooling::Attention);
        let loss = g.cross_entropy(fv.logits, labels);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        let grads = g.backward(loss);
        let out = vars
            .iter()
            .zip(self.tensors())
            .map(|(v, (_, t))| grads.get_or_zeros(*v, t))
            .collect();
        Ok((value, out))
    }

    pub fn infer(&self, seqs: &[&LatentSequence], pooling: Pooling) -> Result<Vec<SampleOutput>> {
        let t = self.config.steps();
        let d = self.embed_dim();
        let c = self.num_classes();
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(INFER_CHUNK) {
            let x = self.batch_input(chunk)?;
            let mut g = Graph::new();
            let vars = self.register(&mut g, false);
            let xv = g.input(x);
            let fv = self.build(&mut g, &vars, xv, pooling);
            for b in 0..chunk.len() {
                let steps = g.value(fv.steps).data();
                out.push(SampleOutput {
                    step_embeddings: (0..t).map(|k| steps[(b * t + k) * d..(b * t + k + 1) * d].to_vec()).collect(),
                    attn: g.value(fv.attn).data()[b * t..(b + 1) * t].to_vec(),
                    pooled: g.value(fv.pooled).data()[b * d..(b + 1) * d].to_vec(),
                    gate: fv.gate.map(|w| g.value(w).data()[b * d..(b + 1) * d].to_vec()),
                    logits: g.value(fv.logits).data()[b * c..(b + 1) * c].to_vec(),
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(3);
        cfg.encoder.stage_widths = vec![4, 6];
        cfg.encoder.embed_dim = 8;
        cfg.head = HeadConfig::Prototype {
            prototypes_per_class: 2,
            gate: GateKind::Linear,
            tau_init: 0.8,
        };
        cfg
    }

    fn latent(seed: u64) -> LatentTensor {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = crate::rng::stream(seed, &[9]);
        LatentTensor::new((0..LATENT_LEN).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    #[test]
    fn batched_graph_agrees_with_stepwise_modules() {
        let model = Model::init(small_config()).unwrap();
        let seq = model.sequence(&latent(1), 5).unwrap();
        let out = &model.infer(&[&seq], Pooling::Attention).unwrap()[0];

        let steps: Vec<_> = seq
            .latents
            .iter()
            .map(|l| crate::encoder::encode(&model.encoder, &model.config.encoder, l).unwrap())
            .collect();
        for (a, b) in steps.iter().zip(&out.step_embeddings) {
            for (x, y) in a.values().iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let a = temporal::attn_weights(&model.temporal, &steps).unwrap();
        let pooled = temporal::pool(&steps, &a).unwrap();
        let res = head::forward_head(model.prototype_head().unwrap(), pooled.values()).unwrap();
        for (x, y) in res.posteriors.iter().zip(out.posteriors()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_pooling_is_the_step_mean() {
        let model = Model::init(small_config()).unwrap();
        let seq = model.sequence(&latent(2), 5).unwrap();
        let out = &model.infer(&[&seq], Pooling::Uniform).unwrap()[0];
        for i in 0..8 {
            let mean = out.step_embeddings.iter().map(|s| s[i]).sum::<f64>() / 3.0;
            assert!((mean - out.pooled[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicating_a_sample_reweights_its_gradient() {
        let model = Model::init(small_config()).unwrap();
        let s1 = model.sequence(&latent(3), 1).unwrap();
        let s2 = model.sequence(&latent(4), 2).unwrap();
        let (_, g1) = model.loss_and_grads(model.batch_input(&[&s1]).unwrap(), &[0]).unwrap();
        let (_, g2) = model.loss_and_grads(model.batch_input(&[&s2]).unwrap(), &[2]).unwrap();
        let (_, gdup) = model.loss_and_grads(model.batch_input(&[&s1, &s1, &s2]).unwrap(), &[0, 0, 2]).unwrap();
        for ((a, b), c) in g1.iter().zip(&g2).zip(&gdup) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
                let want = (2.0 * x + y) / 3.0;
                assert!((want - z).abs() <= 1e-10 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn rejects_bad_labels_and_empty_batches() {
        let model = Model::init(small_config()).unwrap();
        let s = model.sequence(&latent(3), 1).unwrap();
        assert!(model.loss_and_grads(model.batch_input(&[&s]).unwrap(), &[3]).is_err());
        assert!(model.loss_and_grads(model.batch_input(&[]).unwrap(), &[]).is_err());
    }
}
