//! Closed-set and open-set evaluation of a trained model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::argmax;
use crate::leaksim::{ClassRole, Dataset, SampleRecord, Split};
use crate::metrics::{self, EerPoint};
use crate::model::{Model, Pooling};
use crate::scoring::{self, AttentionMode, Bandwidth, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranker {
    /// Diagonal Mahalanobis on gated embeddings, fitted on the train split.
    Maha,
    /// Softmax posteriors of the head.
    Posterior,
}

impl Ranker {
    pub fn as_str(self) -> &'static str {
        match self {
            Ranker::Maha => "maha",
            Ranker::Posterior => "posterior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedEval {
    pub ranker: Ranker,
    pub perturbation_level: u8,
    pub class_names: Vec<String>,
    pub per_class_auc: Vec<f64>,
    pub macro_auc: f64,
    pub top1: f64,
    pub samples: usize,
}

/// Per-sample class scores (higher = more likely) for closed-set ranking.
pub fn class_scores(model: &Model, ds: &Dataset, records: &[&SampleRecord], ranker: Ranker) -> Result<Vec<Vec<f64>>> {
    match ranker {
        Ranker::Posterior => {
            let seqs = model.record_sequences(ds, records)?;
            let refs: Vec<_> = seqs.iter().collect();
            Ok(model.infer(&refs, Pooling::Attention)?.iter().map(|o| o.posteriors()).collect())
        }
        Ranker::Maha => {
            let train = ds.closed(Split::Train, 0);
            let fit = scoring::embed_dataset(model, ds, &train, AttentionMode::On)?;
            let labels: Vec<usize> = train.iter().map(|r| r.class_id).collect();
            let stats = scoring::fit_mahalanobis(&fit, &labels, ds.num_closed(), DEFAULT_EPSILON)?;
            scoring::embed_dataset(model, ds, records, AttentionMode::On)?
                .iter()
                .map(|h| scoring::maha_score(&stats, h))
                .collect()
        }
    }
}

pub fn eval_closed(model: &Model, ds: &Dataset, ranker: Ranker, level: u8) -> Result<ClosedEval> {
    if model.num_classes() != ds.num_closed() {
        return Err(Error::Data(format!(
            "model has {} classes, dataset has {} closed classes",
            model.num_classes(),
            ds.num_closed()
        )));
    }
    let test = ds.closed(Split::Test, level);
    if test.is_empty() {
        return Err(Error::Data(format!("no closed test samples at perturbation level {level}")));
    }
    let scores = class_scores(model, ds, &test, ranker)?;
    let labels: Vec<usize> = test.iter().map(|r| r.class_id).collect();
    let m = metrics::macro_auc(&scores, &labels, ds.num_closed())?;
    let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    Ok(ClosedEval {
        ranker,
        perturbation_level: level,
        class_names: ds
            .manifest
            .closed_class_ids()
            .iter()
            .map(|&c| ds.manifest.class(c).map(|e| e.name.clone()).unwrap_or_default())
            .collect(),
        per_class_auc: m.per_class,
        macro_auc: m.macro_auc,
        top1: metrics::top1_accuracy(&predicted, &labels)?,
        samples: test.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub role: ClassRole,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenSetEval {
    pub mode: AttentionMode,
    pub auroc: f64,
    pub eer: f64,
    pub ovl: f64,
    pub eer_point: EerPoint,
    pub bandwidth: f64,
    pub bins: usize,
    pub support: usize,
    pub closed: usize,
    pub open: usize,
    #[serde(skip)]
    pub scores: Vec<ScoredSample>,
}

/// KDE log-likelihood separability of closed test samples (positive) from
/// open and real samples. The KDE support is the closed train and val split;
/// support and queries are embedded together in one pass under `mode`.
pub fn eval_openset(model: &Model, ds: &Dataset, mode: AttentionMode, bins: usize, bandwidth: Bandwidth) -> Result<OpenSetEval> {
    let support = ds.select(|r, role| role == ClassRole::Closed && r.split != Split::Test && r.perturbation_level == 0);
    let queries = ds.select(|r, _| r.split == Split::Test && r.perturbation_level == 0);
    if !queries.iter().any(|r| ds.role(r) != ClassRole::Closed) {
        return Err(Error::Data("dataset has no open or real samples".into()));
    }
    let all: Vec<&SampleRecord> = support.iter().chain(&queries).copied().collect();
    let mut emb = scoring::embed_dataset(model, ds, &all, mode)?;
    let query_emb = emb.split_off(support.len());
    let kde = scoring::fit_kde(emb, bandwidth)?;
    let mut scores = Vec::with_capacity(queries.len());
    for (r, h) in queries.iter().zip(&query_emb) {
        scores.push(ScoredSample {
            sample_id: r.sample_id.clone(),
            role: ds.role(r),
            score: scoring::kde_log_score(&kde, h)?,
        });
    }
    let closed: Vec<f64> = scores.iter().filter(|s| s.role == ClassRole::Closed).map(|s| s.score).collect();
    let open: Vec<f64> = scores.iter().filter(|s| s.role != ClassRole::Closed).map(|s| s.score).collect();
    let auroc = metrics::roc_auc(&metrics::ScoredSet::from_groups(&closed, &open))?;
    let eer_point = metrics::eer(&closed, &open)?;
    Ok(OpenSetEval {
        mode,
        auroc,
        eer: eer_point.eer,
        ovl: metrics::ovl(&closed, &open, bins)?,
        eer_point,
        bandwidth: kde.bandwidth,
        bins,
        support: support.len(),
        closed: closed.len(),
        open: open.len(),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepAuc {
    /// Diffusion timestep, or `None` for the attention-pooled embedding.
    pub timestep: Option<usize>,
    pub macro_auc: f64,
}

/// Closed-set Macro AUC of Mahalanobis scores computed from each timestep's
/// ungated embedding alone, followed by the attention-pooled embedding.
pub fn per_step_auc(model: &Model, ds: &Dataset, level: u8) -> Result<Vec<StepAuc>> {
    let train = ds.closed(Split::Train, 0);
    let test = ds.closed(Split::Test, level);
    if test.is_empty() {
        return Err(Error::Data(format!("no closed test samples at perturbation level {level}")));
    }
    let outputs = |recs: &[&SampleRecord]| -> Result<Vec<crate::model::SampleOutput>> {
        let seqs = model.record_sequences(ds, recs)?;
        let refs: Vec<_> = seqs.iter().collect();
        model.infer(&refs, Pooling::Attention)
    };
    let (fit, query) = (outputs(&train)?, outputs(&test)?);
    let fit_labels: Vec<usize> = train.iter().map(|r| r.class_id).collect();
    let labels: Vec<usize> = test.iter().map(|r| r.class_id).collect();
    let c = ds.num_closed();
    let score = |pick: &dyn Fn(&crate::model::SampleOutput) -> Vec<f64>| -> Result<f64> {
        let emb: Vec<Vec<f64>> = fit.iter().map(pick).collect();
        let stats = scoring::fit_mahalanobis(&emb, &fit_labels, c, DEFAULT_EPSILON)?;
        let scores = query.iter().map(|o| scoring::maha_score(&stats, &pick(o))).collect::<Result<Vec<_>>>()?;
        Ok(metrics::macro_auc(&scores, &labels, c)?.macro_auc)
    };
    let mut out = Vec::with_capacity(model.config.steps() + 1);
    for (k, &t) in model.config.timesteps.iter().enumerate() {
        out.push(StepAuc {
            timestep: Some(t),
            macro_auc: score(&|o| o.step_embeddings[k].clone())?,
        });
    }
    out.push(StepAuc {
        timestep: None,
        macro_auc: score(&|o| o.pooled.clone())?,
    });
    Ok(out)
}
