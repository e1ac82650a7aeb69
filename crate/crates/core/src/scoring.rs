//! Comparators over frozen embeddings: diagonal Mahalanobis and Gaussian KDE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leaksim::{ClassRole, Dataset, SampleRecord};
use crate::model::{Model, Pooling};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub epsilon: f64,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }
}

fn check_dims(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::Data("no embeddings".into()))?;
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("embeddings must share one positive dimension".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    Ok(d)
}

/// Per-class means and population variances.
pub fn fit_mahalanobis(embeddings: &[Vec<f64>], labels: &[usize], num_classes: usize, epsilon: f64) -> Result<ClassStats> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings vs {} labels", embeddings.len(), labels.len())));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let d = check_dims(embeddings)?;
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (h, &y) in embeddings.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
        sums[y].iter_mut().zip(h).for_each(|(s, v)| *s += v);
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Data(format!("class {c} has {} samples; need at least 2", counts[c])));
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let mut variances = vec![vec![0.0; d]; num_classes];
    for (h, &y) in embeddings.iter().zip(labels) {
        for ((v, x), m) in variances[y].iter_mut().zip(h).zip(&means[y]) {
            *v += (x - m) * (x - m);
        }
    }
    for (v, &n) in variances.iter_mut().zip(&counts) {
        v.iter_mut().for_each(|x| *x /= n as f64);
    }
    Ok(ClassStats {
        means,
        variances,
        counts,
        epsilon,
    })
}

/// `s_c = −Σ_i (h_i − μ_ci)² / (σ²_ci + ε)`; larger is more in-class.
pub fn maha_score(stats: &ClassStats, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != stats.dim() {
        return Err(Error::Shape(format!("embedding dim {} vs fitted dim {}", h.len(), stats.dim())));
    }
    Ok(stats
        .means
        .iter()
        .zip(&stats.variances)
        .map(|(mu, var)| {
            -h.iter()
                .zip(mu)
                .zip(var)
                .map(|((x, m), v)| (x - m) * (x - m) / (v + stats.epsilon))
                .sum::<f64>()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Uniform temporal mean, no gate.
    Off,
    /// Learned temporal attention, embedding multiplied by the gate.
    On,
    /// `On` for closed-role samples, `Off` for everything else.
    #[serde(rename = "asymmetric")]
    AsymmetricClosedOnly,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Off, AttentionMode::On, AttentionMode::AsymmetricClosedOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Off => "off",
            AttentionMode::On => "on",
            AttentionMode::AsymmetricClosedOnly => "asymmetric",
        }
    }

    fn path_for(self, role: ClassRole) -> bool {
        match self {
            AttentionMode::Off => false,
            AttentionMode::On => true,
            AttentionMode::AsymmetricClosedOnly => role == ClassRole::Closed,
        }
    }
}

/// Frozen embeddings of `records` under `mode`, in record order.
pub fn embed_dataset(model: &Model, ds: &Dataset, records: &[&SampleRecord], mode: AttentionMode) -> Result<Vec<Vec<f64>>> {
    if records.is_empty() {
        return Err(Error::Data("nothing to embed".into()));
    }
    let on: Vec<bool> = records.iter().map(|r| mode.path_for(ds.role(r))).collect();
    let mut out = vec![Vec::new(); records.len()];
    for attention in [true, false] {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| on[i] == attention).collect();
        if idx.is_empty() {
            continue;
        }
        let recs: Vec<&SampleRecord> = idx.iter().map(|&i| records[i]).collect();
        let seqs = model.record_sequences(ds, &recs)?;
        let refs: Vec<_> = seqs.iter().collect();
        let pooling = if attention { Pooling::Attention } else { Pooling::Uniform };
        for (i, o) in idx.into_iter().zip(model.infer(&refs, pooling)?) {
            out[i] = if attention { o.gated() } else { o.pooled };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    pub support: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub dim: usize,
}

/// `N^(−1/(D+4)) · mean_i std_i`, population standard deviations.
pub fn scott_bandwidth(support: &[Vec<f64>]) -> Result<f64> {
    let d = check_dims(support)?;
    let n = support.len() as f64;
    let mut mean_std = 0.0;
    for i in 0..d {
        let m = support.iter().map(|h| h[i]).sum::<f64>() / n;
        let var = support.iter().map(|h| (h[i] - m).powi(2)).sum::<f64>() / n;
        mean_std += var.sqrt() / d as f64;
    }
    let bw = n.powf(-1.0 / (d as f64 + 4.0)) * mean_std;
    if !(bw > 0.0 && bw.is_finite()) {
        return Err(Error::Numeric("degenerate KDE support; set the bandwidth explicitly".into()));
    }
    Ok(bw)
}

pub fn fit_kde(support: Vec<Vec<f64>>, bandwidth: Bandwidth) -> Result<KdeModel> {
    let dim = check_dims(&support)?;
    let bandwidth = match bandwidth {
        Bandwidth::Auto => scott_bandwidth(&support)?,
        Bandwidth::Fixed(b) if b > 0.0 && b.is_finite() => b,
        Bandwidth::Fixed(b) => return Err(Error::Config(format!("bandwidth must be positive, got {b}"))),
    };
    Ok(KdeModel { support, bandwidth, dim })
}

/// Log density of an isotropic Gaussian mixture centred on the support points.
pub fn kde_log_score(model: &KdeModel, h: &[f64]) -> Result<f64> {
    if h.len() != model.dim {
        return Err(Error::Shape(format!("query dim {} vs support dim {}", h.len(), model.dim)));
    }
    let s2 = model.bandwidth * model.bandwidth;
    let expo: Vec<f64> = model
        .support
        .iter()
        .map(|x| -x.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * s2))
        .collect();
    let m = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + expo.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
    let n = model.support.len() as f64;
    Ok(lse - n.ln() - 0.5 * model.dim as f64 * (2.0 * std::f64::consts::PI * s2).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_fit_class() {
        let s = fit_mahalanobis(&[vec![0.0, 0.0], vec![2.0, 0.0]], &[0, 0], 1, DEFAULT_EPSILON).unwrap();
        assert_eq!(s.means[0], vec![1.0, 0.0]);
        assert_eq!(s.variances[0], vec![1.0, 0.0]);
        let q = maha_score(&s, &[1.0, 1.0]).unwrap()[0];
        assert_eq!(q, -(0.0 / (1.0 + 1e-6) + 1.0 / 1e-6));
        assert_eq!(maha_score(&s, &[1.0, 0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn degenerate_and_invalid_fits() {
        let s = fit_mahalanobis(&[vec![3.0], vec![3.0]], &[0, 0], 1, DEFAULT_EPSILON).unwrap();
        assert_eq!(s.variances[0], vec![0.0]);
        assert!(maha_score(&s, &[4.0]).unwrap()[0].is_finite());
        assert!(fit_mahalanobis(&[vec![1.0], vec![2.0], vec![3.0]], &[0, 0, 1], 2, DEFAULT_EPSILON).is_err());
        assert!(maha_score(&s, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn isotropic_reduction() {
        let pts = vec![vec![-1.0, -1.0], vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0]];
        let s = fit_mahalanobis(&pts, &[0; 4], 1, 1e-300).unwrap();
        assert_eq!(s.variances[0], vec![1.0, 1.0]);
        let q = maha_score(&s, &[3.0, 4.0]).unwrap()[0];
        assert!((q + 25.0).abs() < 1e-12);
    }

    #[test]
    fn kde_fixtures() {
        let k = fit_kde(vec![vec![0.5, -1.0, 2.0]], Bandwidth::Fixed(1.0)).unwrap();
        let s = kde_log_score(&k, &[0.5, -1.0, 2.0]).unwrap();
        assert!((s + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);

        let far = kde_log_score(&k, &[1e3, 0.0, 0.0]).unwrap();
        assert!(far.is_finite() && far < -1e5);

        // two points, direct sum at bandwidth 1:
        // (2π)^(−1)·½(e^(−½·1) + e^(−½·4)) at query 0 with support (1,0), (0,2)
        let k2 = fit_kde(vec![vec![1.0, 0.0], vec![0.0, 2.0]], Bandwidth::Fixed(1.0)).unwrap();
        let direct = (0.5 * ((-0.5f64).exp() + (-2.0f64).exp()) / (2.0 * std::f64::consts::PI)).ln();
        assert!((kde_log_score(&k2, &[0.0, 0.0]).unwrap() - direct).abs() < 1e-14);
        assert!(fit_kde(vec![], Bandwidth::Auto).is_err());
        assert!(fit_kde(vec![vec![1.0]], Bandwidth::Fixed(0.0)).is_err());
    }

    #[test]
    fn duplicate_support_doubles_contribution() {
        let one = fit_kde(vec![vec![0.0], vec![5.0]], Bandwidth::Fixed(1.0)).unwrap();
        let dup = fit_kde(vec![vec![0.0], vec![0.0], vec![5.0]], Bandwidth::Fixed(1.0)).unwrap();
        // at the origin the far point is negligible: 2/3 of mass versus 1/2
        let ratio = (kde_log_score(&dup, &[0.0]).unwrap() - kde_log_score(&one, &[0.0]).unwrap()).exp();
        assert!((ratio - 4.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn auto_bandwidth_closed_form() {
        // support built so every dimension has population std exactly 1: ±1 alternating
        let support: Vec<Vec<f64>> = (0..256).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }; 64]).collect();
        let bw = scott_bandwidth(&support).unwrap();
        assert!((bw - 256f64.powf(-1.0 / 68.0)).abs() < 1e-15);
        assert!((bw - 0.921_689_640_940_865_4).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn maha_peaks_at_mean_and_falls_along_rays(
            pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 3..10),
            dir in proptest::collection::vec(-1.0f64..1.0, 3),
            t1 in 0.01f64..2.0, dt in 0.01f64..2.0,
        ) {
            let labels = vec![0; pts.len()];
            let s = fit_mahalanobis(&pts, &labels, 1, DEFAULT_EPSILON).unwrap();
            let mu = s.means[0].clone();
            prop_assert_eq!(maha_score(&s, &mu).unwrap()[0], 0.0);
            prop_assume!(dir.iter().zip(&s.variances[0]).any(|(d, v)| d.abs() > 1e-3 && *v > 0.0));
            let at = |t: f64| -> Vec<f64> { mu.iter().zip(&dir).map(|(m, d)| m + t * d).collect() };
            let a = maha_score(&s, &at(t1)).unwrap()[0];
            let b = maha_score(&s, &at(t1 + dt)).unwrap()[0];
            prop_assert!(b < a && a < 0.0);
        }

        #[test]
        fn maha_is_order_independent(pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 4..10)) {
            let labels: Vec<usize> = (0..pts.len()).map(|i| i % 2).collect();
            let a = fit_mahalanobis(&pts, &labels, 2, DEFAULT_EPSILON).unwrap();
            let mut rp = pts.clone();
            let mut rl = labels.clone();
            rp.reverse();
            rl.reverse();
            let b = fit_mahalanobis(&rp, &rl, 2, DEFAULT_EPSILON).unwrap();
            for (x, y) in a.means.iter().flatten().zip(b.means.iter().flatten()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.variances.iter().flatten().zip(b.variances.iter().flatten()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kde_shift_equivariant(
            pts in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 1..8),
            q in proptest::collection::vec(-2.0f64..2.0, 3),
            shift in proptest::collection::vec(-50.0f64..50.0, 3),
            bw in 0.2f64..3.0,
        ) {
            let k = fit_kde(pts.clone(), Bandwidth::Fixed(bw)).unwrap();
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect();
            let km = fit_kde(moved, Bandwidth::Fixed(bw)).unwrap();
            let qm: Vec<f64> = q.iter().zip(&shift).map(|(a, s)| a + s).collect();
            prop_assert!((kde_log_score(&k, &q).unwrap() - kde_log_score(&km, &qm).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn wider_bandwidth_lifts_far_queries(bw in 0.3f64..2.0, extra in 0.1f64..2.0) {
            let support = vec![vec![0.0, 0.0], vec![0.5, -0.5]];
            let q = [20.0, 20.0];
            let a = kde_log_score(&fit_kde(support.clone(), Bandwidth::Fixed(bw)).unwrap(), &q).unwrap();
            let b = kde_log_score(&fit_kde(support, Bandwidth::Fixed(bw + extra)).unwrap(), &q).unwrap();
            prop_assert!(b > a);
        }
    }
}
