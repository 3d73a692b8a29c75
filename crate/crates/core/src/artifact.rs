//! Portable-CT acquisition artifacts: linear motion blur and ring bands,
//! plus the five-level severity schedule that composes them with dose noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dose::{simulate_low_dose, DoseLevel};
use crate::error::{Error, Result};
use crate::image::{clip01, reflect_index, GrayImage};
use crate::seed::SeedSpec;

/// Linear motion: odd kernel length `L` and direction `θ` in degrees, `[0, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    length_px: usize,
    angle_deg: f64,
}

impl MotionParams {
    pub fn new(length_px: usize, angle_deg: f64) -> Result<Self> {
        if length_px == 0 || length_px.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "motion length must be odd and >= 1, got {length_px}"
            )));
        }
        if !(0.0..180.0).contains(&angle_deg) {
            return Err(Error::invalid(format!(
                "motion angle must lie in [0,180), got {angle_deg}"
            )));
        }
        Ok(Self {
            length_px,
            angle_deg,
        })
    }

    pub fn length_px(&self) -> usize {
        self.length_px
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }
}

/// Square convolution kernel, row-major, odd side length.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.size + x]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn snap(v: f64) -> f64 {
    if (v - v.round()).abs() < 1e-9 {
        v.round()
    } else {
        v
    }
}

/// Line-segment kernel of length `L` through the centre at angle `θ`.
///
/// `L` unit-spaced sample points along the segment are splatted bilinearly
/// into the grid, then the kernel is normalised to sum to one. Angles are
/// counter-clockwise with `y` pointing down, so 90° is a vertical line.
pub fn motion_kernel(params: &MotionParams) -> Kernel {
    let size = params.length_px;
    let half = (size / 2) as isize;
    let mut weights = vec![0.0; size * size];
    let theta = params.angle_deg.to_radians();
    let (dx, dy) = (snap(theta.cos()), snap(-theta.sin()));
    for k in 0..size {
        let t = k as f64 - half as f64;
        let px = snap(t * dx);
        let py = snap(t * dy);
        let (x0, y0) = (px.floor(), py.floor());
        let (tx, ty) = (px - x0, py - y0);
        for (ox, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (oy, wy) in [(0, 1.0 - ty), (1, ty)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let cx = x0 as isize + ox + half;
                let cy = y0 as isize + oy + half;
                if (0..size as isize).contains(&cx) && (0..size as isize).contains(&cy) {
                    weights[cy as usize * size + cx as usize] += w;
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Kernel { size, weights }
}

/// 2-D convolution with mirror padding (no edge repetition).
pub fn convolve_reflect(img: &GrayImage, kernel: &Kernel) -> Result<GrayImage> {
    let (w, h) = (img.width(), img.height());
    if kernel.size > w || kernel.size > h {
        return Err(Error::invalid(format!(
            "kernel {k}x{k} larger than image {w}x{h}",
            k = kernel.size
        )));
    }
    let half = (kernel.size / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..kernel.size)
        .flat_map(|ky| (0..kernel.size).map(move |kx| (kx, ky)))
        .filter_map(|(kx, ky)| {
            let wgt = kernel.get(kx, ky);
            (wgt != 0.0).then_some((kx as isize - half, ky as isize - half, wgt))
        })
        .collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for &(ox, oy, wgt) in &taps {
                let sx = reflect_index(x - ox, w);
                let sy = reflect_index(y - oy, h);
                acc += wgt * img.get(sx, sy);
            }
            out.push(acc);
        }
    }
    clip01(w, h, out)
}

pub fn motion_blur(img: &GrayImage, params: &MotionParams) -> Result<GrayImage> {
    if params.length_px == 1 {
        return Ok(img.clone());
    }
    convolve_reflect(img, &motion_kernel(params))
}

/// Ring-band configuration used when sampling [`RingParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingBandConfig {
    pub min_bands: usize,
    pub max_bands: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for RingBandConfig {
    fn default() -> Self {
        Self {
            min_bands: 3,
            max_bands: 8,
            sigma_min: 1.0,
            sigma_max: 3.0,
        }
    }
}

impl RingBandConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_bands == 0 || self.min_bands > self.max_bands {
            return Err(Error::invalid(format!(
                "ring band count range {}..={} is empty or starts at 0",
                self.min_bands, self.max_bands
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::invalid(format!(
                "ring sigma range [{}, {}] is invalid",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

/// Concentric Gaussian bands with multiplicative strength `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingParams {
    alpha: f64,
    band_radii: Vec<f64>,
    band_sigmas: Vec<f64>,
}

impl RingParams {
    pub fn new(alpha: f64, band_radii: Vec<f64>, band_sigmas: Vec<f64>) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(format!(
                "ring alpha must lie in [0,1), got {alpha}"
            )));
        }
        if band_radii.is_empty() || band_radii.len() != band_sigmas.len() {
            return Err(Error::invalid(format!(
                "ring needs matching nonempty radius/sigma lists, got {} and {}",
                band_radii.len(),
                band_sigmas.len()
            )));
        }
        if band_sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("ring band sigmas must be positive"));
        }
        if band_radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("ring band radii must be non-negative"));
        }
        Ok(Self {
            alpha,
            band_radii,
            band_sigmas,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_bands(&self) -> usize {
        self.band_radii.len()
    }

    pub fn band_radii(&self) -> &[f64] {
        &self.band_radii
    }

    pub fn band_sigmas(&self) -> &[f64] {
        &self.band_sigmas
    }

    fn raw_profile(&self, r: f64) -> f64 {
        self.band_radii
            .iter()
            .zip(&self.band_sigmas)
            .map(|(c, s)| (-(r - c) * (r - c) / (2.0 * s * s)).exp())
            .sum()
    }
}

fn half_diagonal(width: usize, height: usize) -> f64 {
    ((width * width + height * height) as f64).sqrt() / 2.0
}

/// Samples band count, radii and widths for one image. Deterministic in `seed`.
pub fn sample_ring_params(
    alpha: f64,
    width: usize,
    height: usize,
    bands: &RingBandConfig,
    seed: SeedSpec,
) -> Result<RingParams> {
    bands.validate()?;
    let mut rng = seed.rng();
    let n = rng.random_range(bands.min_bands..=bands.max_bands);
    let rmax = half_diagonal(width, height);
    let radii = (0..n).map(|_| rng.random_range(0.0..=rmax)).collect();
    let sigmas = (0..n)
        .map(|_| rng.random_range(bands.sigma_min..=bands.sigma_max))
        .collect();
    RingParams::new(alpha, radii, sigmas)
}

/// Normalised radial profile `s(r)` with peak value 1 over `[0, rmax]`.
pub struct RingProfile<'a> {
    params: &'a RingParams,
    scale: f64,
}

impl<'a> RingProfile<'a> {
    pub fn new(params: &'a RingParams, rmax: f64) -> Self {
        const STEP: f64 = 0.01;
        let n = (rmax / STEP).ceil() as usize;
        let peak = (0..=n)
            .map(|i| (i as f64 * STEP).min(rmax))
            .chain(params.band_radii.iter().map(|r| r.min(rmax)))
            .map(|r| params.raw_profile(r))
            .fold(0.0, f64::max);
        Self {
            params,
            scale: if peak > 0.0 { 1.0 / peak } else { 0.0 },
        }
    }

    pub fn at(&self, r: f64) -> f64 {
        self.params.raw_profile(r) * self.scale
    }
}

/// `I · (1 + α·s(r))`, clipped to `[0, 1]`, with `r` measured from the
/// geometric centre of the pixel grid.
pub fn ring_artifact(img: &GrayImage, params: &RingParams) -> Result<GrayImage> {
    let (w, h) = (img.width(), img.height());
    let rmax = half_diagonal(w, h);
    if let Some(r) = params.band_radii.iter().find(|r| **r > rmax) {
        return Err(Error::invalid(format!(
            "ring radius {r} exceeds image half-diagonal {rmax}"
        )));
    }
    if params.alpha == 0.0 {
        return Ok(img.clone());
    }
    let profile = RingProfile::new(params, rmax);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            out.push(img.get(x, y) * (1.0 + params.alpha * profile.at(r)));
        }
    }
    clip01(w, h, out)
}

/// One row of the severity table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub level: u8,
    pub lambda: DoseLevel,
    pub motion_length: usize,
    pub ring_alpha: f64,
}

/// Resolved corruption for one severity level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Severity {
    pub level: u8,
    pub dose: DoseLevel,
    pub motion_length: usize,
    pub ring_alpha: f64,
    pub ring_bands: RingBandConfig,
}

/// Severity table. Higher levels lower `λ` and raise `L` and `α` jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeveritySchedule {
    pub levels: Vec<SeverityRow>,
    #[serde(default)]
    pub ring_bands: RingBandConfig,
}

impl Default for SeveritySchedule {
    fn default() -> Self {
        let row = |level, lambda, motion_length, ring_alpha| SeverityRow {
            level,
            lambda: DoseLevel::new(lambda).expect("positive"),
            motion_length,
            ring_alpha,
        };
        Self {
            levels: vec![
                row(1, 40.0, 3, 0.02),
                row(2, 20.0, 3, 0.02),
                row(3, 10.0, 5, 0.05),
                row(4, 5.0, 5, 0.05),
                row(5, 1.0, 7, 0.10),
            ],
            ring_bands: RingBandConfig::default(),
        }
    }
}

impl SeveritySchedule {
    /// Checks each row and the joint monotonicity of the table.
    pub fn validate(&self) -> Result<()> {
        self.ring_bands.validate()?;
        if self.levels.is_empty() {
            return Err(Error::invalid("severity schedule is empty"));
        }
        for r in &self.levels {
            MotionParams::new(r.motion_length, 0.0)?;
            if !(0.0..1.0).contains(&r.ring_alpha) {
                return Err(Error::invalid(format!(
                    "severity {}: ring alpha {} outside [0,1)",
                    r.level, r.ring_alpha
                )));
            }
        }
        let mut sorted: Vec<&SeverityRow> = self.levels.iter().collect();
        sorted.sort_by_key(|r| r.level);
        for pair in sorted.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.level == b.level {
                return Err(Error::invalid(format!("duplicate severity level {}", a.level)));
            }
            if b.lambda > a.lambda || b.motion_length < a.motion_length || b.ring_alpha < a.ring_alpha
            {
                return Err(Error::invalid(format!(
                    "severity {} is milder than severity {} in some component",
                    b.level, a.level
                )));
            }
        }
        Ok(())
    }

    pub fn severity(&self, level: u8) -> Result<Severity> {
        let row = self
            .levels
            .iter()
            .find(|r| r.level == level)
            .ok_or_else(|| Error::invalid(format!("severity {level} is not in the schedule")))?;
        Ok(Severity {
            level,
            dose: row.lambda,
            motion_length: row.motion_length,
            ring_alpha: row.ring_alpha,
            ring_bands: self.ring_bands,
        })
    }
}

/// Dose noise, then motion blur at a per-image random angle, then ring bands.
/// Each stage draws from its own child of `seed`.
pub fn apply_severity(img: &GrayImage, sev: &Severity, seed: SeedSpec) -> Result<GrayImage> {
    let dosed = simulate_low_dose(img, sev.dose, seed.derive("dose"))?;
    let angle = seed.derive("motion").rng().random_range(0.0..180.0);
    let moved = motion_blur(&dosed, &MotionParams::new(sev.motion_length, angle)?)?;
    let rings = sample_ring_params(
        sev.ring_alpha,
        img.width(),
        img.height(),
        &sev.ring_bands,
        seed.derive("ring"),
    )?;
    ring_artifact(&moved, &rings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iq::ssim;
    use crate::synthetic::phantom;

    #[test]
    fn motion_params_validation() {
        assert!(MotionParams::new(2, 0.0).is_err());
        assert!(MotionParams::new(0, 0.0).is_err());
        assert!(MotionParams::new(3, 180.0).is_err());
        assert!(MotionParams::new(3, -1.0).is_err());
        assert!(MotionParams::new(3, 179.9).is_ok());
    }

    #[test]
    fn unit_kernel_is_identity() {
        for angle in [0.0, 33.0, 90.0, 171.0] {
            let k = motion_kernel(&MotionParams::new(1, angle).unwrap());
            assert_eq!(k.weights, vec![1.0]);
        }
    }

    #[test]
    fn horizontal_and_vertical_length_three() {
        let h = motion_kernel(&MotionParams::new(3, 0.0).unwrap());
        let third = 1.0 / 3.0;
        assert_eq!(h.weights, vec![0.0, 0.0, 0.0, third, third, third, 0.0, 0.0, 0.0]);
        let v = motion_kernel(&MotionParams::new(3, 90.0).unwrap());
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(v.get(x, y), h.get(y, x));
            }
        }
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        for l in [1, 3, 5, 7, 9] {
            for i in 0..16 {
                let k = motion_kernel(&MotionParams::new(l, i as f64 * 180.0 / 16.0).unwrap());
                assert!((k.sum() - 1.0).abs() < 1e-12);
                assert!(k.weights.iter().all(|w| *w >= 0.0));
                let n = k.weights.len();
                for j in 0..n {
                    assert!((k.weights[j] - k.weights[n - 1 - j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blur_spreads_single_pixel_along_row() {
        let mut px = vec![0.0; 64];
        px[3 * 8 + 4] = 1.0;
        let img = GrayImage::new(8, 8, px).unwrap();
        let out = motion_blur(&img, &MotionParams::new(3, 0.0).unwrap()).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if y == 3 && (3..=5).contains(&x) { 1.0 / 3.0 } else { 0.0 };
                assert!((out.get(x, y) - expect).abs() < 1e-15, "({x},{y})");
            }
        }
    }

    #[test]
    fn blur_preserves_constants_and_rejects_oversized_kernel() {
        let img = GrayImage::filled(12, 10, 0.6).unwrap();
        for angle in [0.0, 27.0, 45.0, 133.0] {
            let out = motion_blur(&img, &MotionParams::new(7, angle).unwrap()).unwrap();
            assert!(out.pixels().iter().all(|v| (v - 0.6).abs() < 1e-12));
        }
        let small = GrayImage::filled(4, 4, 0.5).unwrap();
        assert!(motion_blur(&small, &MotionParams::new(5, 0.0).unwrap()).is_err());
        let img = phantom(16, 16, false, 3);
        assert_eq!(motion_blur(&img, &MotionParams::new(1, 10.0).unwrap()).unwrap(), img);
    }

    #[test]
    fn ring_params_determinism_and_validation() {
        let cfg = RingBandConfig::default();
        let a = sample_ring_params(0.05, 64, 64, &cfg, SeedSpec::new(1, 2)).unwrap();
        let b = sample_ring_params(0.05, 64, 64, &cfg, SeedSpec::new(1, 2)).unwrap();
        assert_eq!(a, b);
        assert!((3..=8).contains(&a.n_bands()));
        let rmax = half_diagonal(64, 64);
        assert!(a.band_radii().iter().all(|r| (0.0..=rmax).contains(r)));
        assert!(a.band_sigmas().iter().all(|s| (1.0..=3.0).contains(s)));
        assert!(RingParams::new(1.0, vec![1.0], vec![1.0]).is_err());
        assert!(RingParams::new(0.1, vec![1.0], vec![0.0]).is_err());
        assert!(RingParams::new(0.1, vec![1.0, 2.0], vec![1.0]).is_err());
    }

    #[test]
    fn ring_band_count_is_uniform() {
        let cfg = RingBandConfig::default();
        let n = 10_000;
        let mut counts = [0usize; 6];
        for i in 0..n {
            let p = sample_ring_params(0.1, 32, 32, &cfg, SeedSpec::new(99, i)).unwrap();
            counts[p.n_bands() - 3] += 1;
        }
        let expect = n as f64 / 6.0;
        let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn ring_identities() {
        let img = phantom(32, 32, true, 4);
        let p = RingParams::new(0.0, vec![5.0, 9.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(ring_artifact(&img, &p).unwrap(), img);
        let zero = GrayImage::filled(20, 20, 0.0).unwrap();
        let p = RingParams::new(0.1, vec![5.0], vec![2.0]).unwrap();
        assert_eq!(ring_artifact(&zero, &p).unwrap(), zero);
        let p = RingParams::new(0.1, vec![100.0], vec![2.0]).unwrap();
        assert!(ring_artifact(&zero, &p).is_err());
    }

    #[test]
    fn ring_peak_at_band_center() {
        // 65x65 grid: centre is pixel (32, 32); (52, 32) sits at radius 20.
        let img = GrayImage::filled(65, 65, 0.5).unwrap();
        let p = RingParams::new(0.1, vec![20.0], vec![2.0]).unwrap();
        let out = ring_artifact(&img, &p).unwrap();
        assert!((out.get(52, 32) - 0.55).abs() < 1e-12);
        assert!((out.get(32, 12) - 0.55).abs() < 1e-12);
        // Far from the band the image is untouched to within exp(-200/...) noise.
        assert!((out.get(32, 32) - 0.5).abs() < 1e-12);
        assert!(out.pixels().iter().zip(img.pixels()).all(|(o, i)| o >= i));
    }

    #[test]
    fn overlapping_bands_normalised_to_unit_peak() {
        let p = RingParams::new(0.1, vec![10.0, 10.5, 11.0], vec![2.0, 2.0, 2.0]).unwrap();
        let prof = RingProfile::new(&p, 30.0);
        let peak = (0..3000).map(|i| prof.at(i as f64 * 0.01)).fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-6);
    }

    #[test]
    fn default_schedule_is_valid_and_monotone() {
        let s = SeveritySchedule::default();
        s.validate().unwrap();
        let five = s.severity(5).unwrap();
        assert_eq!(five.dose.lambda(), 1.0);
        assert_eq!(five.motion_length, 7);
        assert_eq!(five.ring_alpha, 0.10);
        assert!(s.severity(6).is_err());

        let mut bad = s.clone();
        bad.levels[4].lambda = DoseLevel::new(50.0).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn severity_is_deterministic_and_paired() {
        let img = phantom(32, 32, true, 5);
        let s = SeveritySchedule::default().severity(3).unwrap();
        let seed = SeedSpec::for_item(7, "slice");
        let a = apply_severity(&img, &s, seed).unwrap();
        let b = apply_severity(&img, &s, seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn severity_degrades_ssim_monotonically() {
        let img = phantom(48, 48, false, 6);
        let sched = SeveritySchedule::default();
        let mut prev = f64::INFINITY;
        for level in 1..=5 {
            let sev = sched.severity(level).unwrap();
            let mean = (0..20)
                .map(|s| ssim(&img, &apply_severity(&img, &sev, SeedSpec::new(s, 1)).unwrap()).unwrap())
                .sum::<f64>()
                / 20.0;
            assert!(mean < prev, "level {level}: {mean} !< {prev}");
            prev = mean;
        }
    }
}
