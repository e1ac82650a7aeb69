//! Frequency-domain filtering of 32×32 planes.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::schedule::{LATENT_CHANNELS, LATENT_SIZE};

pub(crate) const NYQUIST: f64 = (LATENT_SIZE / 2) as f64;

/// Radial frequency of DFT bin `(ky, kx)` in cycles per plane.
pub(crate) fn radius(ky: usize, kx: usize) -> f64 {
    let signed = |k: usize| if k <= LATENT_SIZE / 2 { k as f64 } else { k as f64 - LATENT_SIZE as f64 };
    signed(ky).hypot(signed(kx))
}

pub(crate) struct Spectral {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Spectral {
    pub(crate) fn new() -> Self {
        let mut planner = FftPlanner::new();
        Spectral {
            fwd: planner.plan_fft_forward(LATENT_SIZE),
            inv: planner.plan_fft_inverse(LATENT_SIZE),
        }
    }

    fn fft2(&self, buf: &mut [Complex<f64>], fft: &Arc<dyn Fft<f64>>) {
        let n = LATENT_SIZE;
        for row in buf.chunks_mut(n) {
            fft.process(row);
        }
        let mut col = vec![Complex::default(); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            fft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
    }

    /// Multiplies the spectrum of one plane by `gain(radius)`.
    pub(crate) fn filter_plane(&self, plane: &mut [f64], gain: impl Fn(f64) -> f64) {
        let n = LATENT_SIZE;
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft2(&mut buf, &self.fwd);
        for ky in 0..n {
            for kx in 0..n {
                buf[ky * n + kx] *= gain(radius(ky, kx));
            }
        }
        self.fft2(&mut buf, &self.inv);
        let norm = (n * n) as f64;
        plane.iter_mut().zip(&buf).for_each(|(p, c)| *p = c.re / norm);
    }

    pub(crate) fn filter(&self, field: &mut [f64], gain: impl Fn(f64) -> f64 + Copy) {
        for plane in field.chunks_mut(LATENT_SIZE * LATENT_SIZE).take(LATENT_CHANNELS) {
            self.filter_plane(plane, gain);
        }
    }

    #[cfg(test)]
    /// Fraction of a field's energy at radius ≥ `cutoff` cycles.
    pub(crate) fn energy_above(&self, field: &[f64], cutoff: f64) -> f64 {
        let n = LATENT_SIZE;
        let (mut hi, mut total) = (0.0, 0.0);
        for plane in field.chunks(n * n) {
            let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
            self.fft2(&mut buf, &self.fwd);
            for ky in 0..n {
                for kx in 0..n {
                    let e = buf[ky * n + kx].norm_sqr();
                    total += e;
                    if radius(ky, kx) >= cutoff {
                        hi += e;
                    }
                }
            }
        }
        if total == 0.0 {
            0.0
        } else {
            hi / total
        }
    }
}

/// Number of DFT bins with radius strictly below `cutoff` cycles.
pub(crate) fn bins_below(cutoff: f64) -> usize {
    (0..LATENT_SIZE)
        .flat_map(|ky| (0..LATENT_SIZE).map(move |kx| radius(ky, kx)))
        .filter(|&r| r < cutoff)
        .count()
}
