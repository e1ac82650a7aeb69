//! Latent-space stand-ins for post-processing chains.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{LatentTensor, LATENT_CHANNELS, LATENT_SIZE};

pub const MAX_LEVEL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// White noise at 0.25× the latent RMS.
    Noise,
    /// Separable [1, 2, 1]/4 smoothing, edges clamped.
    Blur,
    /// A 22–28 px window resampled bilinearly back to 32 px.
    CropResize,
    /// Per-channel gain in [0.75, 1.25] and offset of 0.3× RMS scale.
    GainOffset,
}

const ALL: [Transform; 4] = [Transform::Noise, Transform::Blur, Transform::CropResize, Transform::GainOffset];

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn idx(c: usize, y: usize, x: usize) -> usize {
    (c * LATENT_SIZE + y) * LATENT_SIZE + x
}

pub fn apply_transform(t: Transform, x: &[f64], r: &mut impl Rng) -> Vec<f64> {
    let n = LATENT_SIZE;
    let scale = rms(x);
    match t {
        Transform::Noise => x.iter().map(|v| v + 0.25 * scale * r.sample::<f64, _>(StandardNormal)).collect(),
        Transform::Blur => {
            let k = [0.25, 0.5, 0.25];
            let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
            let mut tmp = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            for c in 0..LATENT_CHANNELS {
                for y in 0..n {
                    for xx in 0..n {
                        tmp[idx(c, y, xx)] = (0..3).map(|j| k[j] * x[idx(c, y, clamp(xx as isize + j as isize - 1))]).sum();
                    }
                }
                for y in 0..n {
                    for xx in 0..n {
                        out[idx(c, y, xx)] = (0..3).map(|j| k[j] * tmp[idx(c, clamp(y as isize + j as isize - 1), xx)]).sum();
                    }
                }
            }
            out
        }
        Transform::CropResize => {
            let w = r.random_range(22..=28usize);
            let oy = r.random_range(0..=n - w);
            let ox = r.random_range(0..=n - w);
            let step = w as f64 / n as f64;
            let sample_at = |c: usize, fy: f64, fx: f64| {
                let y0 = fy.floor().clamp(0.0, (n - 1) as f64) as usize;
                let x0 = fx.floor().clamp(0.0, (n - 1) as f64) as usize;
                let y1 = (y0 + 1).min(n - 1);
                let x1 = (x0 + 1).min(n - 1);
                let (dy, dx) = ((fy - y0 as f64).clamp(0.0, 1.0), (fx - x0 as f64).clamp(0.0, 1.0));
                let top = x[idx(c, y0, x0)] * (1.0 - dx) + x[idx(c, y0, x1)] * dx;
                let bot = x[idx(c, y1, x0)] * (1.0 - dx) + x[idx(c, y1, x1)] * dx;
                top * (1.0 - dy) + bot * dy
            };
            let mut out = vec![0.0; x.len()];
            for c in 0..LATENT_CHANNELS {
                for y in 0..n {
                    for xx in 0..n {
                        // pixel centres of the output grid mapped into the window
                        let fy = oy as f64 + (y as f64 + 0.5) * step - 0.5;
                        let fx = ox as f64 + (xx as f64 + 0.5) * step - 0.5;
                        out[idx(c, y, xx)] = sample_at(c, fy, fx);
                    }
                }
            }
            out
        }
        Transform::GainOffset => {
            let mut out = x.to_vec();
            for plane in out.chunks_mut(n * n) {
                let gain = r.random_range(0.75..1.25);
                let offset = 0.3 * scale * r.sample::<f64, _>(StandardNormal);
                plane.iter_mut().for_each(|v| *v = gain * *v + offset);
            }
            out
        }
    }
}

/// Transforms chosen for `(level, seed)`: `level` distinct ones in random order.
pub fn chosen_transforms(level: u8, seed: u64) -> Result<Vec<Transform>> {
    if level > MAX_LEVEL {
        return Err(Error::Domain(format!("perturbation level {level} outside 0..={MAX_LEVEL}")));
    }
    let mut r = rng::stream(seed, &[rng::tag("perturb-choice")]);
    let mut all = ALL;
    all.shuffle(&mut r);
    Ok(all[..level as usize].to_vec())
}

pub fn perturb(latent: &LatentTensor, level: u8, seed: u64) -> Result<LatentTensor> {
    let chain = chosen_transforms(level, seed)?;
    let mut data = latent.data().to_vec();
    for (i, t) in chain.into_iter().enumerate() {
        let mut r = rng::stream(seed, &[rng::tag("perturb-apply"), i as u64]);
        data = apply_transform(t, &data, &mut r);
    }
    Ok(LatentTensor::from_vec_unchecked(data, latent.scale_applied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leaksim::{make_profile, sample_latent, GenConfig};

    fn latent(seed: u64) -> LatentTensor {
        let p = make_profile(0, &GenConfig::default(), 1).unwrap();
        sample_latent(&p, seed)
    }

    fn msd(a: &LatentTensor, b: &LatentTensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
    }

    #[test]
    fn level_zero_is_identity() {
        let x = latent(3);
        assert_eq!(perturb(&x, 0, 99).unwrap(), x);
        assert!(perturb(&x, 4, 99).is_err());
    }

    #[test]
    fn deterministic_and_distinct_choices() {
        let x = latent(3);
        assert_eq!(perturb(&x, 2, 5).unwrap(), perturb(&x, 2, 5).unwrap());
        for s in 0..20 {
            let c = chosen_transforms(3, s).unwrap();
            assert_eq!(c.len(), 3);
            assert!(c[0] != c[1] && c[1] != c[2] && c[0] != c[2]);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let x = vec![1.5; crate::schedule::LATENT_LEN];
        let mut r = rng::stream(0, &[]);
        let y = apply_transform(Transform::Blur, &x, &mut r);
        assert!(y.iter().all(|v| (v - 1.5).abs() < 1e-15));
        let full = {
            // a 32 px window at offset 0 reproduces the input exactly
            let w = vec![0.5; crate::schedule::LATENT_LEN];
            let mut r = rng::stream(0, &[]);
            apply_transform(Transform::CropResize, &w, &mut r)
        };
        assert!(full.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn deviation_grows_with_level() {
        let (mut one, mut three) = (0.0, 0.0);
        for s in 0..200u64 {
            let x = latent(s);
            one += msd(&perturb(&x, 1, 1000 + s).unwrap(), &x);
            three += msd(&perturb(&x, 3, 1000 + s).unwrap(), &x);
        }
        assert!(three > one, "level 3 {three} vs level 1 {one}");
    }
}
