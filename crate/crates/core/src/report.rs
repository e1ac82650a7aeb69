//! Report tables (JSON and CSV) and static SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{ClosedEval, OpenSetEval, StepAuc};
use crate::leaksim::Dataset;
use crate::training::{dataset_digest, hex_sha256, Checkpoint};

/// Configuration digest and seeds behind a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    /// SHA-256 of the generator, model and training configs as compact JSON.
    pub config_digest: String,
    pub dataset_digest: String,
    /// Dataset digest the checkpoint was trained on, when different.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trained_on: Option<String>,
    pub dataset_seed: u64,
    pub train_seed: Option<u64>,
    pub init_seed: Option<u64>,
}

impl Provenance {
    pub fn new(ds: &Dataset, ckpt: Option<&Checkpoint>) -> Self {
        let digest = dataset_digest(ds);
        let configs = json!({
            "generator": ds.manifest.generator,
            "model": ckpt.map(|c| &c.model.config),
            "train": ckpt.map(|c| &c.train_config),
        });
        Provenance {
            config_digest: hex_sha256(configs.to_string().as_bytes()),
            trained_on: ckpt.map(|c| c.dataset_digest.clone()).filter(|d| *d != digest),
            dataset_digest: digest,
            dataset_seed: ds.manifest.generator.seed,
            train_seed: ckpt.map(|c| c.train_config.seed),
            init_seed: ckpt.map(|c| c.model.config.encoder.init_seed),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Open-set summary; `metrics` holds exactly AUROC, EER and OVL.
pub fn openset_json(ev: &OpenSetEval, prov: &Provenance) -> serde_json::Value {
    json!({
        "provenance": prov,
        "mode": ev.mode,
        "metrics": { "auroc": ev.auroc, "eer": ev.eer, "ovl": ev.ovl },
        "details": {
            "eer_threshold": ev.eer_point.threshold,
            "far": ev.eer_point.far,
            "frr": ev.eer_point.frr,
            "bandwidth": ev.bandwidth,
            "bins": ev.bins,
            "support": ev.support,
            "closed": ev.closed,
            "open": ev.open,
        },
    })
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per evaluation: per-class AUC columns, then the macro average and Top-1.
pub fn closed_csv(evals: &[ClosedEval]) -> Result<String> {
    let Some(first) = evals.first() else {
        return Err(Error::Data("no closed-set evaluations to tabulate".into()));
    };
    if evals.iter().any(|e| e.class_names != first.class_names) {
        return Err(Error::Data("evaluations disagree on class names".into()));
    }
    let mut out = String::from("ranker,perturbation_level");
    for name in &first.class_names {
        out.push(',');
        out.push_str(&csv_field(name));
    }
    out.push_str(",macro_auc,top1\n");
    for e in evals {
        let _ = write!(out, "{},{}", e.ranker.as_str(), e.perturbation_level);
        for a in &e.per_class_auc {
            let _ = write!(out, ",{}", num(*a));
        }
        let _ = writeln!(out, ",{},{}", num(e.macro_auc), num(e.top1));
    }
    Ok(out)
}

pub fn openset_csv(evals: &[OpenSetEval]) -> String {
    let mut out = String::from("mode,auroc,eer,ovl\n");
    for e in evals {
        let _ = writeln!(out, "{},{},{},{}", e.mode.as_str(), num(e.auroc), num(e.eer), num(e.ovl));
    }
    out
}

pub fn scores_csv(ev: &OpenSetEval) -> String {
    let mut out = String::from("sample_id,role,log_density\n");
    for s in &ev.scores {
        let role = serde_json::to_value(s.role).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", csv_field(&s.sample_id), role, s.score);
    }
    out
}

pub fn step_label(s: &StepAuc) -> String {
    match s.timestep {
        Some(t) => format!("t={t}"),
        None => "pooled".to_string(),
    }
}

pub fn per_step_csv(steps: &[StepAuc]) -> String {
    let mut out = String::from("step,macro_auc\n");
    for s in steps {
        let _ = writeln!(out, "{},{}", step_label(s), num(s.macro_auc));
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (x0, y0, x1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}" stroke="black"/>"#);
    s
}

/// Overlaid normalized histograms of closed and open scores on shared bins.
pub fn histogram_svg(title: &str, closed: &[f64], open: &[f64], bins: usize) -> Result<String> {
    if closed.is_empty() || open.is_empty() || bins == 0 {
        return Err(Error::Data("histogram needs two non-empty groups and at least one bin".into()));
    }
    let all = closed.iter().chain(open);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numeric("non-finite scores".into()));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for x in v {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            h[i] += 1.0 / v.len() as f64;
        }
        h
    };
    let (hc, ho) = (hist(closed), hist(open));
    let peak = hc.iter().chain(&ho).cloned().fold(0.0, f64::max).max(1e-12);
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let bw = plot_w / bins as f64;
    let mut s = svg_open(title);
    for (h, color) in [(&hc, "#1f77b4"), (&ho, "#d62728")] {
        for (i, v) in h.iter().enumerate() {
            let bh = v / peak * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                MARGIN + i as f64 * bw,
                H - MARGIN - bh,
                bw,
                bh
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}" >{:.3}</text>"#, H - MARGIN + 18.0, lo);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, W - MARGIN / 2.0, H - MARGIN + 18.0, hi);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">log density</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r##"<rect x="{}" y="40" width="12" height="12" fill="#1f77b4" fill-opacity="0.5"/><text x="{}" y="50">closed (n={})</text>"##, W - 180.0, W - 162.0, closed.len());
    let _ = writeln!(s, r##"<rect x="{}" y="58" width="12" height="12" fill="#d62728" fill-opacity="0.5"/><text x="{}" y="68">open + real (n={})</text>"##, W - 180.0, W - 162.0, open.len());
    s.push_str("</svg>\n");
    Ok(s)
}

/// Vertical bars on a fixed [0, 1] axis.
pub fn bar_svg(title: &str, labels: &[String], values: &[f64]) -> Result<String> {
    if labels.len() != values.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} labels for {} values", labels.len(), values.len())));
    }
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let slot = plot_w / labels.len() as f64;
    let mut s = svg_open(title);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = H - MARGIN - tick * plot_h;
        let _ = writeln!(s, r##"<line x1="{MARGIN}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{tick:.2}</text>"##, W - MARGIN / 2.0, MARGIN - 6.0, y + 4.0);
    }
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let bh = v.clamp(0.0, 1.0) * plot_h;
        let x = MARGIN + i as f64 * slot + slot * 0.15;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="#4c72b0"/>"##,
            H - MARGIN - bh,
            slot * 0.7
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#, H - MARGIN - bh - 4.0);
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, H - MARGIN + 18.0, escape(label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Ranker;

    fn closed_eval(level: u8, aucs: Vec<f64>) -> ClosedEval {
        let macro_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
        ClosedEval {
            ranker: Ranker::Maha,
            perturbation_level: level,
            class_names: vec!["gen-0".into(), "gen,1".into()],
            per_class_auc: aucs,
            macro_auc,
            top1: 0.5,
            samples: 4,
        }
    }

    #[test]
    fn closed_csv_layout() {
        let csv = closed_csv(&[closed_eval(0, vec![1.0, 0.5]), closed_eval(2, vec![0.75, 0.25])]).unwrap();
        assert_eq!(
            csv,
            "ranker,perturbation_level,gen-0,\"gen,1\",macro_auc,top1\n\
             maha,0,1.000000,0.500000,0.750000,0.500000\n\
             maha,2,0.750000,0.250000,0.500000,0.500000\n"
        );
        assert!(closed_csv(&[]).is_err());
    }

    #[test]
    fn svgs_are_well_formed() {
        let h = histogram_svg("scores <on>", &[0.0, 1.0, 2.0], &[1.5, 3.0], 4).unwrap();
        assert!(h.starts_with("<svg") && h.ends_with("</svg>\n"));
        assert!(h.contains("scores &lt;on&gt;"));
        assert_eq!(h.matches("fill-opacity=\"0.5\"/>").count(), 8 + 2);
        let b = bar_svg("auc", &["a".into(), "b".into()], &[0.5, 1.2]).unwrap();
        assert!(b.contains(">1.200<"));
        assert!(bar_svg("x", &["a".into()], &[]).is_err());
        assert!(histogram_svg("x", &[], &[1.0], 3).is_err());
        // a single repeated value still renders
        assert!(histogram_svg("x", &[2.0], &[2.0], 3).is_ok());
    }
}
