//! Ranking and separability metrics.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_OVL_BINS: usize = 50;

/// Scores with aligned binary labels (`true` = positive).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        Ok(ScoredSet { scores, labels })
    }

    /// Positive scores first, negative scores second.
    pub fn from_groups(positive: &[f64], negative: &[f64]) -> Self {
        let mut scores = positive.to_vec();
        scores.extend_from_slice(negative);
        let mut labels = vec![true; positive.len()];
        labels.extend(std::iter::repeat_n(false, negative.len()));
        ScoredSet { scores, labels }
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Tie-aware AUC, `P(s+ > s-) + ½·P(s+ = s-)`, via midrank summation.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    check_scores(&set.scores)?;
    let n_pos = set.labels.iter().filter(|&&l| l).count();
    let n_neg = set.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block i..=j shares the average rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| set.labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroAuc {
    pub per_class: Vec<f64>,
    pub macro_auc: f64,
}

/// One-vs-rest AUC of each class's score column, averaged over classes.
/// `scores` is row-per-sample.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<MacroAuc> {
    if num_classes < 2 {
        return Err(Error::Data("macro AUC needs at least two classes".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows vs {} labels", scores.len(), labels.len())));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != num_classes) {
        return Err(Error::Shape(format!("score row has {} columns, expected {num_classes}", row.len())));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        if !labels.contains(&c) {
            return Err(Error::Data(format!("class {c} has no samples")));
        }
        let set = ScoredSet {
            scores: scores.iter().map(|r| r[c]).collect(),
            labels: labels.iter().map(|&l| l == c).collect(),
        };
        per_class.push(roc_auc(&set)?);
    }
    let macro_auc = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(MacroAuc { per_class, macro_auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Equal error rate of accepting `closed` (score ≥ δ) against `open`.
///
/// Candidate thresholds are every observed score and every midpoint between
/// consecutive distinct scores. The threshold minimizing `|FAR − FRR|` is
/// chosen (ties: smaller `(FAR + FRR)/2`, then smaller δ) and
/// `(FAR + FRR)/2` is reported there.
pub fn eer(closed: &[f64], open: &[f64]) -> Result<EerPoint> {
    if closed.is_empty() || open.is_empty() {
        return Err(Error::Data("EER needs non-empty closed and open score sets".into()));
    }
    check_scores(closed)?;
    check_scores(open)?;
    let mut c = closed.to_vec();
    let mut o = open.to_vec();
    c.sort_by(f64::total_cmp);
    o.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = c.iter().chain(&o).cloned().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates = Vec::with_capacity(2 * all.len());
    for (i, &s) in all.iter().enumerate() {
        candidates.push(s);
        if let Some(&next) = all.get(i + 1) {
            candidates.push(s + (next - s) / 2.0);
        }
    }
    let (nc, no) = (c.len() as u64, o.len() as u64);
    // rates compared exactly on the common denominator nc·no
    let mut best: Option<(u64, u64, f64, u64, u64)> = None;
    for &t in &candidates {
        let fa = (o.len() - o.partition_point(|&v| v < t)) as u64;
        let fr = c.partition_point(|&v| v < t) as u64;
        let gap = (fa * nc).abs_diff(fr * no);
        let sum = fa * nc + fr * no;
        if best.is_none_or(|(g, s, ..)| gap < g || (gap == g && sum < s)) {
            best = Some((gap, sum, t, fa, fr));
        }
    }
    let (_, _, threshold, fa, fr) = best.expect("at least one candidate threshold");
    let far = fa as f64 / no as f64;
    let frr = fr as f64 / nc as f64;
    Ok(EerPoint {
        eer: (far + frr) / 2.0,
        threshold,
        far,
        frr,
    })
}

/// Histogram overlap of two score samples over shared edges spanning both.
pub fn ovl(closed: &[f64], open: &[f64], bins: usize) -> Result<f64> {
    if closed.is_empty() || open.is_empty() {
        return Err(Error::Data("OVL needs non-empty closed and open score sets".into()));
    }
    if bins < 2 {
        return Err(Error::Config(format!("OVL needs at least 2 bins, got {bins}")));
    }
    check_scores(closed)?;
    check_scores(open)?;
    if closed.iter().chain(open).any(|v| v.is_infinite()) {
        return Err(Error::Numeric("infinite score in OVL input".into()));
    }
    let lo = closed.iter().chain(open).cloned().fold(f64::INFINITY, f64::min);
    let hi = closed.iter().chain(open).cloned().fold(f64::NEG_INFINITY, f64::max);
    let pc = histogram(closed, lo, hi, bins);
    let po = histogram(open, lo, hi, bins);
    Ok(pc.iter().zip(&po).map(|(a, b)| a.min(*b)).sum::<f64>().min(1.0))
}

pub(crate) fn bin_edge(lo: f64, hi: f64, bins: usize, k: usize) -> f64 {
    if k == bins {
        hi
    } else {
        lo + (hi - lo) * k as f64 / bins as f64
    }
}

/// Normalized histogram; bin `k` holds `edge_k ≤ x < edge_{k+1}`, the last bin is closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &x in values {
        let k = if hi > lo {
            let mut k = (((x - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
            // settle rounding against the exact edge values
            while k > 0 && x < bin_edge(lo, hi, bins, k) {
                k -= 1;
            }
            while k + 1 < bins && x >= bin_edge(lo, hi, bins, k + 1) {
                k += 1;
            }
            k
        } else {
            0
        };
        counts[k] += 1;
    }
    let n = values.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

pub fn top1_accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", predicted.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
