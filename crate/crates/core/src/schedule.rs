//! Cosine noise schedule and partial forward diffusion of latents.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::StoredTensor;
use crate::error::{Error, Result};
use crate::rng;

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIZE: usize = 32;
pub const LATENT_LEN: usize = LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE;
pub const LATENT_SHAPE: [usize; 3] = [LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE];

/// Conventional SD latent scaling constant.
pub const DEFAULT_VAE_SCALE: f64 = 0.18215;

pub const DEFAULT_TIMESTEPS: [usize; 3] = [0, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub offset: f64,
    pub sigma_floor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: 1000,
            offset: 0.008,
            sigma_floor: 1e-3,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return Err(Error::Config("schedule offset must be finite and non-negative".into()));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        Ok(())
    }
}

/// A single 4×32×32 latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Vec<f64>,
    scale_applied: bool,
}

impl LatentTensor {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != LATENT_LEN {
            return Err(Error::Shape(format!(
                "latent needs {LATENT_LEN} values ({:?}), got {}",
                LATENT_SHAPE,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("latent contains non-finite values".into()));
        }
        Ok(LatentTensor {
            data,
            scale_applied: false,
        })
    }

    pub fn zeros() -> Self {
        LatentTensor {
            data: vec![0.0; LATENT_LEN],
            scale_applied: false,
        }
    }

    /// Wraps a raw latent, dividing by `vae_scale` unless the values are
    /// already scaled.
    pub fn ingest(raw: Vec<f64>, vae_scale: f64, already_scaled: bool) -> Result<Self> {
        if !(vae_scale > 0.0 && vae_scale.is_finite()) {
            return Err(Error::Config("vae scale must be positive".into()));
        }
        let mut t = LatentTensor::new(raw)?;
        if !already_scaled {
            t.data.iter_mut().for_each(|v| *v /= vae_scale);
        }
        t.scale_applied = true;
        Ok(t)
    }

    pub fn from_stored(stored: &StoredTensor) -> Result<Self> {
        if stored.shape != [4, 32, 32] {
            return Err(Error::Shape(format!("expected latent shape [4, 32, 32], got {:?}", stored.shape)));
        }
        let mut t = LatentTensor::new(stored.data.iter().map(|&v| v as f64).collect())?;
        t.scale_applied = true;
        Ok(t)
    }

    pub fn to_stored(&self) -> StoredTensor {
        StoredTensor {
            shape: [4, 32, 32],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Rounds values through f32, matching what a file round trip yields.
    pub fn quantized(&self) -> Self {
        LatentTensor {
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            scale_applied: self.scale_applied,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scale_applied(&self) -> bool {
        self.scale_applied
    }

    pub fn mark_scaled(mut self) -> Self {
        self.scale_applied = true;
        self
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>, scale_applied: bool) -> Self {
        debug_assert_eq!(data.len(), LATENT_LEN);
        LatentTensor { data, scale_applied }
    }

    pub fn scaled(&self, c: f64) -> Self {
        LatentTensor {
            data: self.data.iter().map(|v| v * c).collect(),
            scale_applied: self.scale_applied,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * LATENT_SIZE + y) * LATENT_SIZE + x]
    }
}

/// Normalized latents for an increasing set of timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub timesteps: Vec<usize>,
    pub latents: Vec<LatentTensor>,
    pub noise_seed: u64,
}

/// `(alpha_t, sigma_t)` of the squared-cosine cumulative schedule.
pub fn alpha_sigma(t: usize, cfg: &ScheduleConfig) -> Result<(f64, f64)> {
    if t > cfg.total_steps {
        return Err(Error::Domain(format!(
            "timestep {t} outside [0, {}]",
            cfg.total_steps
        )));
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    let angle = |t: usize| (t as f64 / cfg.total_steps as f64 + cfg.offset) / (1.0 + cfg.offset) * half_pi;
    let a0 = angle(0);
    let at = angle(t);
    let f0 = a0.cos().powi(2);
    // cos²a0 − cos²at = sin(at − a0)·sin(at + a0), avoids cancellation for small t
    let one_minus = ((at - a0).sin() * (at + a0).sin() / f0).clamp(0.0, 1.0);
    let alpha_bar = 1.0 - one_minus;
    Ok((alpha_bar.sqrt(), one_minus.sqrt()))
}

fn check_finite(z: &LatentTensor) -> Result<()> {
    if z.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data("latent contains non-finite values".into()))
    }
}

/// Standard normal draws for timestep `t` of the stream keyed by `seed`.
pub fn noise(seed: u64, t: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::tag("diffusion-noise"), t as u64]);
    (0..LATENT_LEN).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// `alpha_t·z0 + sigma_t·eps` with caller-supplied noise.
pub fn forward_diffuse_with_noise(
    z0: &LatentTensor,
    t: usize,
    cfg: &ScheduleConfig,
    eps: &[f64],
) -> Result<LatentTensor> {
    check_finite(z0)?;
    if eps.len() != LATENT_LEN {
        return Err(Error::Shape(format!("noise has {} values, expected {LATENT_LEN}", eps.len())));
    }
    let (alpha, sigma) = alpha_sigma(t, cfg)?;
    let data = z0.data.iter().zip(eps).map(|(z, e)| alpha * z + sigma * e).collect();
    Ok(LatentTensor::from_vec_unchecked(data, z0.scale_applied))
}

pub fn forward_diffuse(z0: &LatentTensor, t: usize, cfg: &ScheduleConfig, seed: u64) -> Result<LatentTensor> {
    check_finite(z0)?;
    alpha_sigma(t, cfg)?;
    forward_diffuse_with_noise(z0, t, cfg, &noise(seed, t))
}

pub fn normalize(zt: &LatentTensor, sigma: f64, cfg: &ScheduleConfig) -> LatentTensor {
    let div = sigma.max(cfg.sigma_floor);
    LatentTensor::from_vec_unchecked(zt.data.iter().map(|v| v / div).collect(), zt.scale_applied)
}

pub fn validate_timesteps(timesteps: &[usize], cfg: &ScheduleConfig) -> Result<()> {
    if timesteps.is_empty() {
        return Err(Error::Config("timestep list is empty".into()));
    }
    if timesteps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("timesteps {timesteps:?} are not strictly increasing")));
    }
    if let Some(&t) = timesteps.iter().find(|&&t| t > cfg.total_steps) {
        return Err(Error::Domain(format!("timestep {t} exceeds total_steps {}", cfg.total_steps)));
    }
    Ok(())
}

pub fn build_sequence(
    z0: &LatentTensor,
    cfg: &ScheduleConfig,
    timesteps: &[usize],
    seed: u64,
) -> Result<LatentSequence> {
    validate_timesteps(timesteps, cfg)?;
    let latents = timesteps
        .iter()
        .map(|&t| {
            let zt = forward_diffuse(z0, t, cfg, seed)?;
            let (_, sigma) = alpha_sigma(t, cfg)?;
            Ok(normalize(&zt, sigma, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentSequence {
        timesteps: timesteps.to_vec(),
        latents,
        noise_seed: seed,
    })
}
