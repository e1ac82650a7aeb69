//! Per-sample interpretability records: which timesteps, features and
//! prototypes drive a prediction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::{self, argmax};
use crate::leaksim::{ClassRole, Dataset, SampleRecord, Split};
use crate::model::{Head, Model, Pooling};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepWeight {
    pub timestep: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPrototypes {
    pub class_id: usize,
    /// Soft-minimum distance to the class.
    pub score: f64,
    pub top_prototype: usize,
    pub distances: Vec<f64>,
    pub responsibilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureContribution {
    pub feature: usize,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub sample_id: String,
    pub class_id: usize,
    pub role: ClassRole,
    pub perturbation_level: u8,
    pub predicted: usize,
    pub posteriors: Vec<f64>,
    pub temporal: Vec<StepWeight>,
    pub gate: Option<Vec<f64>>,
    pub prototypes: Vec<ClassPrototypes>,
    /// Largest `k` per-feature terms behind the prediction: gated squared
    /// differences to the predicted class's top prototype, or `W[c,i]·h_i`
    /// for a linear head.
    pub top_features: Vec<FeatureContribution>,
}

fn top_k(values: &[f64], k: usize) -> Vec<FeatureContribution> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .map(|i| FeatureContribution {
            feature: i,
            contribution: values[i],
        })
        .collect()
}

pub fn explain(model: &Model, ds: &Dataset, records: &[&SampleRecord], k: usize) -> Result<Vec<Explanation>> {
    let seqs = model.record_sequences(ds, records)?;
    let refs: Vec<_> = seqs.iter().collect();
    let outputs = model.infer(&refs, Pooling::Attention)?;
    let mut out = Vec::with_capacity(records.len());
    for (r, o) in records.iter().zip(outputs) {
        let temporal = model
            .config
            .timesteps
            .iter()
            .zip(&o.attn)
            .map(|(&timestep, &weight)| StepWeight { timestep, weight })
            .collect();
        let (predicted, posteriors, prototypes, top_features) = match &model.head {
            Head::Prototype(params) => {
                let res = head::forward_head(params, &o.pooled)?;
                let pred = res.predicted_class();
                let classes: Vec<ClassPrototypes> = (0..params.num_classes())
                    .map(|c| ClassPrototypes {
                        class_id: c,
                        score: res.scores[c],
                        top_prototype: argmax(&res.responsibilities[c]),
                        distances: res.distances[c].clone(),
                        responsibilities: res.responsibilities[c].clone(),
                    })
                    .collect();
                let contrib = res.feature_contributions.as_ref().ok_or_else(|| Error::Numeric("missing feature contributions".into()))?;
                let d = params.dim();
                let start = (pred * params.per_class() + classes[pred].top_prototype) * d;
                let feats = top_k(&contrib.data()[start..start + d], k);
                (pred, res.posteriors, classes, feats)
            }
            Head::Linear(params) => {
                let post = o.posteriors();
                let pred = argmax(&post);
                let d = o.pooled.len();
                let terms: Vec<f64> = (0..d).map(|i| params.weight.data()[pred * d + i] * o.pooled[i]).collect();
                (pred, post, Vec::new(), top_k(&terms, k))
            }
        };
        out.push(Explanation {
            sample_id: r.sample_id.clone(),
            class_id: r.class_id,
            role: ds.role(r),
            perturbation_level: r.perturbation_level,
            predicted,
            posteriors,
            temporal,
            gate: o.gate,
            prototypes,
            top_features,
        });
    }
    Ok(out)
}

/// Records named by `ids`, or the first `limit` unperturbed test records.
pub fn pick_records<'a>(ds: &'a Dataset, ids: &[String], limit: usize) -> Result<Vec<&'a SampleRecord>> {
    if ids.is_empty() {
        return Ok(ds
            .select(|r, _| r.split == Split::Test && r.perturbation_level == 0)
            .into_iter()
            .take(limit)
            .collect());
    }
    ids.iter()
        .map(|id| {
            ds.manifest
                .records
                .iter()
                .find(|r| &r.sample_id == id)
                .ok_or_else(|| Error::Data(format!("unknown sample id {id:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leaksim::{generate, GenConfig};
    use crate::model::{HeadConfig, ModelConfig};

    fn setup(head: HeadConfig) -> (Dataset, Model) {
        let ds = generate(&GenConfig {
            closed_classes: 3,
            open_classes: 1,
            per_class: 8,
            open_per_class: 2,
            split: [0.5, 0.25, 0.25],
            seed: 2,
            ..GenConfig::default()
        })
        .unwrap();
        let mut cfg = ModelConfig::new(3);
        cfg.encoder.stage_widths = vec![4, 6];
        cfg.encoder.embed_dim = 8;
        cfg.head = head;
        (ds, Model::init(cfg).unwrap())
    }

    #[test]
    fn top_k_orders_descending_with_index_ties() {
        let t = top_k(&[0.5, 2.0, 0.5, -1.0], 3);
        let got: Vec<usize> = t.iter().map(|f| f.feature).collect();
        assert_eq!(got, vec![1, 0, 2]);
    }

    #[test]
    fn prototype_explanation_is_consistent() {
        let (ds, model) = setup(HeadConfig::default());
        let recs = pick_records(&ds, &[], 4).unwrap();
        let ex = explain(&model, &ds, &recs, 3).unwrap();
        assert_eq!(ex.len(), 4);
        for e in &ex {
            let a: f64 = e.temporal.iter().map(|s| s.weight).sum();
            assert!((a - 1.0).abs() < 1e-12);
            assert!((e.posteriors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(e.predicted, argmax(&e.posteriors));
            assert_eq!(e.top_features.len(), 3);
            assert!(e.top_features.windows(2).all(|w| w[0].contribution >= w[1].contribution));
            let gate = e.gate.as_ref().unwrap();
            assert!(gate.iter().all(|w| *w > 0.0 && *w < 1.0));
            for p in &e.prototypes {
                assert!((p.responsibilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p.score <= p.distances.iter().cloned().fold(f64::INFINITY, f64::min) + 1e-12);
            }
            // the top prototype's contributions are its distance terms
            let p = &e.prototypes[e.predicted];
            assert!(e.top_features.iter().map(|f| f.contribution).sum::<f64>() <= p.distances[p.top_prototype] + 1e-12);
        }
    }

    #[test]
    fn linear_head_explains_without_prototypes() {
        let (ds, model) = setup(HeadConfig::Linear);
        let id = ds.manifest.records[0].sample_id.clone();
        let ex = explain(&model, &ds, &pick_records(&ds, std::slice::from_ref(&id), 0).unwrap(), 2).unwrap();
        assert_eq!(ex[0].sample_id, id);
        assert!(ex[0].prototypes.is_empty() && ex[0].gate.is_none());
        assert!(pick_records(&ds, &["nope".into()], 0).is_err());
    }
}
