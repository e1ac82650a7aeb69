//! Synthetic per-generator latent corpora.
//!
//! Every generator class owns a low-frequency bias field and a spectral tilt
//! of its low-frequency content; both scale with `bias_strength`, so at
//! strength zero the classes are identically distributed. Open classes use
//! the same construction, and the "real" class is leak-free with its own
//! content statistics.

mod dataset;
mod perturb;
mod spectral;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{LatentTensor, LATENT_LEN};
use crate::tensor::Tensor;

pub use dataset::{
    build_dataset, generate, ClassEntry, Dataset, DatasetManifest, SampleRecord, Split, LATENT_FILE, MANIFEST_FILE,
    SCHEMA_VERSION,
};
pub use perturb::{apply_transform, chosen_transforms, perturb, Transform, MAX_LEVEL};
use spectral::{bins_below, Spectral, NYQUIST};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Closed,
    Open,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub closed_classes: usize,
    pub open_classes: usize,
    pub include_real: bool,
    pub per_class: usize,
    /// Samples per open or real class; all go to the test split.
    pub open_per_class: usize,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    pub bias_strength: f64,
    /// Spectral tilts are drawn from `U(−tilt_range, tilt_range)`.
    pub tilt_range: f64,
    /// Leak cutoff as a fraction of Nyquist.
    pub cutoff: f64,
    pub content_cutoff: f64,
    pub content_std: f64,
    pub noise_std: f64,
    pub real_content_cutoff: f64,
    pub real_content_std: f64,
    pub similarity_bound: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            closed_classes: 6,
            open_classes: 3,
            include_real: true,
            per_class: 200,
            open_per_class: 60,
            split: [0.5, 0.2, 0.3],
            bias_strength: 0.35,
            tilt_range: 0.5,
            cutoff: 0.15,
            content_cutoff: 0.5,
            content_std: 1.0,
            noise_std: 0.2,
            real_content_cutoff: 0.35,
            real_content_std: 1.0,
            similarity_bound: 0.3,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.closed_classes < 2 {
            return bad("need at least 2 closed classes");
        }
        if self.per_class == 0 || (self.open_per_class == 0 && (self.open_classes > 0 || self.include_real)) {
            return bad("samples per class must be positive");
        }
        if self.split.iter().any(|f| !(f.is_finite() && *f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be positive and sum to 1");
        }
        let fin_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !fin_nonneg(self.bias_strength) || !fin_nonneg(self.tilt_range) || !fin_nonneg(self.noise_std) {
            return bad("bias_strength, tilt_range and noise_std must be finite and non-negative");
        }
        if self.bias_strength * self.tilt_range >= 1.0 {
            return bad("bias_strength · tilt_range must stay below 1");
        }
        for (name, v) in [
            ("cutoff", self.cutoff),
            ("content_cutoff", self.content_cutoff),
            ("real_content_cutoff", self.real_content_cutoff),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if !(self.content_std > 0.0 && self.real_content_std > 0.0) {
            return bad("content standard deviations must be positive");
        }
        if !(self.similarity_bound > 0.0 && self.similarity_bound <= 1.0) {
            return bad("similarity_bound must be in (0, 1]");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        for (i, n) in self.split_counts().iter().enumerate() {
            if *n < 2 {
                return Err(Error::Config(format!("split {i} would hold {n} samples per class; need at least 2")));
            }
        }
        Ok(())
    }

    /// Per-class train / val / test counts.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.per_class;
        let train = (n as f64 * self.split[0]).round() as usize;
        let val = ((n as f64 * self.split[1]).round() as usize).min(n - train.min(n));
        [train.min(n), val, n - train.min(n) - val]
    }

    pub fn num_classes(&self) -> usize {
        self.closed_classes + self.open_classes + usize::from(self.include_real)
    }

    pub fn role(&self, class_id: usize) -> Option<ClassRole> {
        if class_id < self.closed_classes {
            Some(ClassRole::Closed)
        } else if class_id < self.closed_classes + self.open_classes {
            Some(ClassRole::Open)
        } else if class_id < self.num_classes() {
            Some(ClassRole::Real)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentStats {
    pub std: f64,
    /// Fraction of Nyquist.
    pub cutoff: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakProfile {
    pub class_id: usize,
    pub role: ClassRole,
    /// (4, 32, 32); unit RMS, or all zeros at strength 0.
    pub bias_field: Tensor,
    pub spectral_tilt: f64,
    pub bias_strength: f64,
    /// Seed of the accepted bias-field draw.
    pub texture_seed: u64,
    /// Leak cutoff as a fraction of Nyquist.
    pub cutoff: f64,
    pub content: ContentStats,
}

fn white(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn bias_field(texture_seed: u64, cutoff_cycles: f64, spec: &Spectral) -> Vec<f64> {
    let mut r = rng::stream(texture_seed, &[]);
    let mut f = white(&mut r, LATENT_LEN);
    // falling amplitude keeps most of the leak in the coarsest modes
    spec.filter(&mut f, |k| if k < cutoff_cycles { 1.0 / (1.0 + k) } else { 0.0 });
    let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
    f.iter_mut().for_each(|v| *v /= rms);
    f
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Profiles for every class of `cfg`, in class-id order. Leak fields are
/// accepted one class at a time, redrawing until the cosine similarity to
/// every earlier class is below `similarity_bound`.
pub fn make_profiles(cfg: &GenConfig, seed: u64) -> Result<Vec<LeakProfile>> {
    cfg.validate()?;
    let spec = Spectral::new();
    let cutoff_cycles = cfg.cutoff * NYQUIST;
    let leaky = cfg.closed_classes + cfg.open_classes;
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(leaky);
    let mut out = Vec::with_capacity(cfg.num_classes());
    let content = ContentStats {
        std: cfg.content_std,
        cutoff: cfg.content_cutoff,
        noise_std: cfg.noise_std,
    };
    for c in 0..leaky {
        let mut found = None;
        for attempt in 0..cfg.max_retries as u64 {
            let ts = rng::derive_seed(seed, &[rng::tag("leak-texture"), c as u64, attempt]);
            let f = bias_field(ts, cutoff_cycles, &spec);
            if accepted.iter().all(|g| cosine(&f, g).abs() < cfg.similarity_bound) {
                found = Some((ts, f));
                break;
            }
        }
        let (texture_seed, field) = found.ok_or_else(|| {
            Error::Generation(format!(
                "class {c}: no bias field below similarity bound {} after {} draws",
                cfg.similarity_bound, cfg.max_retries
            ))
        })?;
        let mut r = rng::stream(seed, &[rng::tag("leak-tilt"), c as u64]);
        let spectral_tilt = if cfg.tilt_range > 0.0 {
            r.random_range(-cfg.tilt_range..=cfg.tilt_range)
        } else {
            0.0
        };
        let stored = if cfg.bias_strength > 0.0 {
            field.clone()
        } else {
            vec![0.0; LATENT_LEN]
        };
        accepted.push(field);
        out.push(LeakProfile {
            class_id: c,
            role: cfg.role(c).expect("leaky class id in range"),
            bias_field: Tensor::from_parts(crate::schedule::LATENT_SHAPE.to_vec(), stored),
            spectral_tilt,
            bias_strength: cfg.bias_strength,
            texture_seed,
            cutoff: cfg.cutoff,
            content,
        });
    }
    if cfg.include_real {
        out.push(LeakProfile {
            class_id: leaky,
            role: ClassRole::Real,
            bias_field: Tensor::zeros(&crate::schedule::LATENT_SHAPE),
            spectral_tilt: 0.0,
            bias_strength: 0.0,
            texture_seed: 0,
            cutoff: cfg.cutoff,
            content: ContentStats {
                std: cfg.real_content_std,
                cutoff: cfg.real_content_cutoff,
                noise_std: cfg.noise_std,
            },
        });
    }
    Ok(out)
}

pub fn make_profile(class_id: usize, cfg: &GenConfig, seed: u64) -> Result<LeakProfile> {
    if class_id >= cfg.num_classes() {
        return Err(Error::Config(format!("class {class_id} outside the {} configured classes", cfg.num_classes())));
    }
    Ok(make_profiles(cfg, seed)?.swap_remove(class_id))
}

/// One latent: smooth content (low band tilted by `1 + strength·tilt`)
/// plus `strength·bias_field` plus white noise.
pub fn sample_latent(profile: &LeakProfile, sample_seed: u64) -> LatentTensor {
    sample_with(profile, sample_seed, &Spectral::new())
}

pub(crate) fn sample_with(profile: &LeakProfile, sample_seed: u64, spec: &Spectral) -> LatentTensor {
    let mut r = rng::stream(sample_seed, &[rng::tag("leak-sample")]);
    let mut content = white(&mut r, LATENT_LEN);
    let noise = white(&mut r, LATENT_LEN);
    let content_cycles = profile.content.cutoff * NYQUIST;
    let leak_cycles = profile.cutoff * NYQUIST;
    let tilt = 1.0 + profile.bias_strength * profile.spectral_tilt;
    // normalizes filtered white noise to unit expected per-pixel variance
    let norm = ((crate::schedule::LATENT_SIZE.pow(2)) as f64 / bins_below(content_cycles) as f64).sqrt();
    spec.filter(&mut content, |k| {
        if k >= content_cycles {
            0.0
        } else if k < leak_cycles {
            tilt * norm
        } else {
            norm
        }
    });
    let s = profile.bias_strength;
    let data = content
        .iter()
        .zip(profile.bias_field.data())
        .zip(&noise)
        .map(|((c, b), n)| profile.content.std * c + s * b + profile.content.noise_std * n)
        .collect();
    LatentTensor::from_vec_unchecked(data, true)
}
