//! Low-dose CT simulation by per-pixel Poisson photon statistics.
//!
//! A high-dose slice `I` in `[0, 1]` becomes `Poisson(λ·I) / λ`, clipped back
//! into `[0, 1]`. Smaller `λ` means fewer photons and a noisier image.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::image::{clip01, GrayImage};
use crate::seed::SeedSpec;

/// Dose levels reported by default, highest noise first.
pub const DEFAULT_DOSES: [f64; 5] = [1.0, 5.0, 10.0, 20.0, 40.0];

/// Means at or above this use transformed rejection instead of inversion.
const INVERSION_CUTOFF: f64 = 30.0;

/// Photon-count scaling factor `λ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DoseLevel(f64);

impl DoseLevel {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::invalid(format!(
                "dose factor must be finite and > 0, got {lambda}"
            )));
        }
        Ok(Self(lambda))
    }

    pub fn lambda(self) -> f64 {
        self.0
    }

    pub fn defaults() -> Vec<DoseLevel> {
        DEFAULT_DOSES.iter().map(|&l| DoseLevel(l)).collect()
    }
}

impl TryFrom<f64> for DoseLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        DoseLevel::new(v)
    }
}

impl From<DoseLevel> for f64 {
    fn from(d: DoseLevel) -> f64 {
        d.0
    }
}

impl fmt::Display for DoseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Draws one Poisson variate.
///
/// Sequential-search inversion below a mean of 30, Hörmann's PTRS
/// transformed rejection above it. Both are exact samplers.
pub fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(Error::invalid(format!(
            "Poisson mean must be finite and >= 0, got {mean}"
        )));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < INVERSION_CUTOFF {
        Ok(poisson_inversion(mean, rng))
    } else {
        Ok(poisson_ptrs(mean, rng))
    }
}

fn poisson_inversion<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    // The tail beyond mean + 40 sigma is below f64 resolution; the cap only
    // guards against cdf rounding short of u.
    let cap = (mean + 40.0 * mean.sqrt() + 40.0) as u64;
    while u > cdf && k < cap {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

fn poisson_ptrs<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let log_mean = mean.ln();
    let smu = mean.sqrt();
    let b = 0.931 + 2.53 * smu;
    let a = -0.059 + 0.024_83 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * log_mean - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// Per-pixel `Poisson(λ·I) / λ` before clipping.
pub fn simulate_low_dose_unclipped(
    img: &GrayImage,
    dose: DoseLevel,
    seed: SeedSpec,
) -> Result<Vec<f64>> {
    let lambda = dose.lambda();
    let streams = seed.counter_streams();
    img.pixels()
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            if v == 0.0 {
                return Ok(0.0);
            }
            let mut rng = streams.stream(i as u64);
            poisson_draw(lambda * v, &mut rng).map(|k| k as f64 / lambda)
        })
        .collect()
}

/// Simulated low-dose slice, clipped to `[0, 1]`. Deterministic in `seed`.
pub fn simulate_low_dose(img: &GrayImage, dose: DoseLevel, seed: SeedSpec) -> Result<GrayImage> {
    let raw = simulate_low_dose_unclipped(img, dose, seed)?;
    clip01(img.width(), img.height(), raw)
}
