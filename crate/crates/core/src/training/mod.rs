//! End-to-end training under cross-entropy with AdamW.

mod checkpoint;
mod gradcheck;
mod optim;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{log_digest, Checkpoint, ResumeState, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use checkpoint::hex_sha256;
pub use gradcheck::{gradient_check, rel_err, GradCheckReport, TensorCheck, FD_STEP, REL_FLOOR};
pub use optim::{optimizer_step, AdamHyper, AdamState};

use crate::error::{Error, Result};
use crate::leaksim::{Dataset, Split};
use crate::metrics;
use crate::model::{Head, Model, ModelConfig, Pooling};
use crate::rng;
use crate::schedule::LatentSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Audit a sample of gradient coordinates on the first batch before training.
    pub gradient_check_mode: bool,
    /// Prototype jitter, relative to the RMS spread of warm-up embeddings.
    pub prototype_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            gradient_check_mode: false,
            prototype_jitter: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.prototype_jitter >= 0.0 && self.prototype_jitter.is_finite()) {
            return Err(Error::Config("prototype_jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

/// One line of the training log. Wall time is reported separately so the
/// log stays reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_macro_auc: f64,
}

/// `−(1/B)·Σ ln π_y` over posterior rows.
pub fn ce_loss(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_batch(posteriors, labels)?;
    Ok(-posteriors.iter().zip(labels).map(|(p, &y)| p[y].ln()).sum::<f64>() / labels.len() as f64)
}

/// Same loss from logits, `ln Σ e^z − z_y` with the max shifted out.
pub fn ce_loss_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_batch(logits, labels)?;
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

fn check_batch(rows: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Data(format!("{} rows vs {} labels", rows.len(), labels.len())));
    }
    for (r, &y) in rows.iter().zip(labels) {
        if y >= r.len() {
            return Err(Error::Data(format!("label {y} out of range for {} classes", r.len())));
        }
    }
    Ok(())
}

/// Weight decay applies to everything except the prototypes.
pub fn decay_mask(model: &Model) -> Vec<bool> {
    model.tensors().iter().map(|(n, _)| !n.starts_with("head.prototypes")).collect()
}

pub fn dataset_digest(ds: &Dataset) -> String {
    hex_sha256(&serde_json::to_vec(&ds.manifest).expect("manifest serializes"))
}

/// Validation Macro AUC ranking by posteriors.
pub fn posterior_macro_auc(model: &Model, seqs: &[LatentSequence], labels: &[usize]) -> Result<f64> {
    let refs: Vec<&LatentSequence> = seqs.iter().collect();
    let post: Vec<Vec<f64>> = model.infer(&refs, Pooling::Attention)?.iter().map(|o| o.posteriors()).collect();
    Ok(metrics::macro_auc(&post, labels, model.num_classes())?.macro_auc)
}

pub struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: TrainConfig,
    model: Model,
    best: Model,
    adam: AdamState,
    next_epoch: usize,
    best_epoch: usize,
    best_auc: f64,
    log: Vec<EpochRecord>,
    decay: Vec<bool>,
    train_seqs: Vec<LatentSequence>,
    train_labels: Vec<usize>,
    val_seqs: Vec<LatentSequence>,
    val_labels: Vec<usize>,
    digest: String,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.num_classes != ds.num_closed() {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {} closed classes",
                model_cfg.num_classes,
                ds.num_closed()
            )));
        }
        let model = Model::init(model_cfg)?;
        let mut t = Self::assemble(ds, cfg, model)?;
        t.init_prototypes()?;
        t.best = t.model.clone();
        Ok(t)
    }

    pub fn resume(ds: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        let digest = dataset_digest(ds);
        if digest != ckpt.dataset_digest {
            return Err(Error::Data("checkpoint was trained on a different dataset".into()));
        }
        let mut current = ckpt.model.clone();
        for (dst, src) in current.tensors_mut().into_iter().zip(ckpt.resume.params) {
            *dst = src;
        }
        let mut t = Self::assemble(ds, ckpt.train_config, current)?;
        t.best = ckpt.model;
        t.adam = ckpt.resume.adam;
        t.next_epoch = ckpt.resume.next_epoch;
        t.best_epoch = ckpt.resume.best_epoch;
        t.best_auc = ckpt.resume.best_val_macro_auc;
        t.log = ckpt.log;
        Ok(t)
    }

    fn assemble(ds: &'a Dataset, cfg: TrainConfig, model: Model) -> Result<Self> {
        let train = ds.closed(Split::Train, 0);
        let val = ds.closed(Split::Val, 0);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("dataset needs non-empty train and val splits".into()));
        }
        let params: Vec<_> = model.tensors().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::new(&params);
        Ok(Trainer {
            ds,
            decay: decay_mask(&model),
            train_seqs: model.record_sequences(ds, &train)?,
            train_labels: train.iter().map(|r| r.class_id).collect(),
            val_seqs: model.record_sequences(ds, &val)?,
            val_labels: val.iter().map(|r| r.class_id).collect(),
            digest: dataset_digest(ds),
            best: model.clone(),
            model,
            cfg,
            adam,
            next_epoch: 0,
            best_epoch: 0,
            best_auc: f64::NEG_INFINITY,
            log: Vec::new(),
        })
    }

    /// Prototypes start at per-class means of the initial model's pooled
    /// embeddings, plus seeded jitter.
    fn init_prototypes(&mut self) -> Result<()> {
        let Head::Prototype(_) = &self.model.head else {
            return Ok(());
        };
        let refs: Vec<&LatentSequence> = self.train_seqs.iter().collect();
        let pooled: Vec<Vec<f64>> = self.model.infer(&refs, Pooling::Attention)?.into_iter().map(|o| o.pooled).collect();
        let c = self.model.num_classes();
        let d = self.model.embed_dim();
        let mut means = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for (h, &y) in pooled.iter().zip(&self.train_labels) {
            counts[y] += 1;
            means[y].iter_mut().zip(h).for_each(|(m, v)| *m += v);
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("class {empty} has no training samples")));
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        let spread = (pooled
            .iter()
            .zip(&self.train_labels)
            .map(|(h, &y)| h.iter().zip(&means[y]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (pooled.len() * d) as f64)
            .sqrt();
        let scale = self.cfg.prototype_jitter * spread;
        let mut r = rng::stream(self.cfg.seed, &[rng::tag("prototype-jitter")]);
        let Head::Prototype(h) = &mut self.model.head else { unreachable!() };
        let m = h.per_class();
        let data = h.prototypes.data_mut();
        for ci in 0..c {
            for mi in 0..m {
                for k in 0..d {
                    let z: f64 = StandardNormal.sample(&mut r);
                    data[(ci * m + mi) * d + k] = means[ci][k] + scale * z;
                }
            }
        }
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.next_epoch >= self.cfg.epochs
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        if self.cfg.gradient_check_mode && self.adam.step == 0 {
            let n = self.cfg.batch_size.min(self.train_seqs.len());
            let refs: Vec<&LatentSequence> = self.train_seqs[..n].iter().collect();
            let x = self.model.batch_input(&refs)?;
            let report = gradient_check(&self.model, &x, &self.train_labels[..n], Some(4))?;
            if !report.passes(1e-4) {
                return Err(Error::Numeric(format!("gradient check failed: max relative error {:.3e}", report.max_rel_err)));
            }
        }
        let mut order: Vec<usize> = (0..self.train_seqs.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &[rng::tag("shuffle"), epoch as u64]));
        let hyper = self.cfg.hyper();
        let (mut loss_sum, mut seen, mut failed) = (0.0, 0usize, 0usize);
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for idx in &batches {
            let refs: Vec<&LatentSequence> = idx.iter().map(|&i| &self.train_seqs[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| self.train_labels[i]).collect();
            let x = self.model.batch_input(&refs)?;
            match self.model.loss_and_grads(x, &labels) {
                Ok((loss, grads)) => {
                    let mut params = self.model.tensors_mut();
                    optimizer_step(&mut params, &grads, &self.decay, &mut self.adam, &hyper)?;
                    loss_sum += loss * labels.len() as f64;
                    seen += labels.len();
                }
                Err(Error::Numeric(_)) => failed += 1,
                Err(e) => return Err(e),
            }
        }
        if failed == batches.len() {
            return Err(Error::Numeric(format!("epoch {epoch}: loss non-finite on every batch")));
        }
        let val = posterior_macro_auc(&self.model, &self.val_seqs, &self.val_labels)?;
        if val > self.best_auc {
            self.best_auc = val;
            self.best_epoch = epoch;
            self.best = self.model.clone();
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            val_macro_auc: val,
        };
        self.log.push(rec.clone());
        self.next_epoch += 1;
        Ok(rec)
    }

    /// Runs the remaining epochs, reporting each with its wall time.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord, Duration)) -> Result<()> {
        while !self.finished() {
            let start = Instant::now();
            let rec = self.run_epoch()?;
            on_epoch(&rec, start.elapsed());
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.best.clone(),
            train_config: self.cfg.clone(),
            resume: ResumeState {
                params: self.model.tensors().into_iter().map(|(_, t)| t.clone()).collect(),
                adam: self.adam.clone(),
                next_epoch: self.next_epoch,
                best_epoch: self.best_epoch,
                best_val_macro_auc: self.best_auc,
            },
            log: self.log.clone(),
            dataset_digest: self.digest.clone(),
        }
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }
}

pub fn train(ds: &Dataset, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(ds, model_cfg, cfg)?;
    t.run(|_, _| {})?;
    Ok(t.checkpoint())
}
