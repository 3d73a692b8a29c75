//! Image-quality metrics against a clean reference: MSE, PSNR and SSIM.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Peak intensity of a normalised image.
pub const MAX_INTENSITY: f64 = 1.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR in decibels; identical images give [`Psnr::Infinite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

// JSON has no infinity, so the marker is the string "inf".
impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Psnr::Finite(v)),
            Repr::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR value {s:?}"))),
        }
    }
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (MAX_INTENSITY * MAX_INTENSITY / mse).log10())
    }
}

pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<Psnr> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable weighted filter over every fully-contained window position.
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 windows lying fully inside the image.
///
/// Gaussian window with σ = 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    a.same_dims(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (xa, xb) = (a.pixels(), b.pixels());
    let sq = |f: &dyn Fn(usize) -> f64| (0..xa.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(xa, w, h, &taps);
    let mu_b = filter_valid(xb, w, h, &taps);
    let e_aa = filter_valid(&sq(&|i| xa[i] * xa[i]), w, h, &taps);
    let e_bb = filter_valid(&sq(&|i| xb[i] * xb[i]), w, h, &taps);
    let e_ab = filter_valid(&sq(&|i| xa[i] * xb[i]), w, h, &taps);

    let c1 = (SSIM_K1 * MAX_INTENSITY).powi(2);
    let c2 = (SSIM_K2 * MAX_INTENSITY).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqResult {
    pub mse: f64,
    pub psnr_db: Psnr,
    pub ssim: f64,
}

pub fn iq_result(reference: &GrayImage, test: &GrayImage) -> Result<IqResult> {
    let m = mse(reference, test)?;
    Ok(IqResult {
        mse: m,
        psnr_db: psnr_from_mse(m),
        ssim: ssim(reference, test)?,
    })
}

/// Unweighted mean over a set of per-image results. Infinite PSNRs are
/// excluded from the PSNR mean and counted separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqSummary {
    pub n_images: usize,
    pub mse: f64,
    pub psnr_db: Option<f64>,
    pub n_psnr_infinite: usize,
    pub ssim: f64,
}

pub fn summarize_iq(results: &[IqResult]) -> Option<IqSummary> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    let finite: Vec<f64> = results.iter().filter_map(|r| r.psnr_db.finite()).collect();
    Some(IqSummary {
        n_images: results.len(),
        mse: results.iter().map(|r| r.mse).sum::<f64>() / n,
        psnr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        n_psnr_infinite: results.len() - finite.len(),
        ssim: results.iter().map(|r| r.ssim).sum::<f64>() / n,
    })
}
