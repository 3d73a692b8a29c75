//! Synthetic head-CT-like phantoms and labelled corpora.
//!
//! Used by tests, the benchmark command, and anyone who wants to exercise the
//! harness without a real dataset. A phantom has a bright skull ring, a
//! textured brain ellipse with darker ventricles, and optionally a bright
//! hyperdense blob standing in for a haemorrhage.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{write_manifest, Dataset, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::image::{save_image, GrayImage};
use crate::seed::SeedSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomParams {
    /// Intensity added inside the lesion.
    pub lesion_contrast: f64,
    /// Lesion radius as a fraction of the image width.
    pub lesion_radius_frac: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            lesion_contrast: 0.35,
            lesion_radius_frac: 0.12,
        }
    }
}

pub fn phantom(width: usize, height: usize, lesion: bool, variant: u64) -> GrayImage {
    phantom_with(width, height, lesion, variant, &PhantomParams::default())
}

pub fn phantom_with(
    width: usize,
    height: usize,
    lesion: bool,
    variant: u64,
    params: &PhantomParams,
) -> GrayImage {
    let mut rng = SeedSpec::new(variant, 0x0070_6861_6e74_6f6d).rng();
    let cx = (width as f64 - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * width as f64;
    let cy = (height as f64 - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * height as f64;
    let ax = width as f64 * rng.random_range(0.36..0.42);
    let ay = height as f64 * rng.random_range(0.40..0.46);
    let tilt: f64 = rng.random_range(-0.2..0.2);
    let brain = rng.random_range(0.38..0.46);
    let (f1, f2) = (rng.random_range(2.0..5.0), rng.random_range(2.0..5.0));
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let vent = rng.random_range(0.08..0.14);

    let angle = rng.random_range(0.0..2.0 * PI);
    let dist = rng.random_range(0.15..0.45);
    let lx = cx + dist * ax * angle.cos();
    let ly = cy + dist * ay * angle.sin();
    let lr = params.lesion_radius_frac * width as f64 * rng.random_range(0.8..1.2);

    let (ct, st) = (tilt.cos(), tilt.sin());
    GrayImage::from_fn(width, height, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let u = (dx * ct + dy * st) / ax;
        let v = (-dx * st + dy * ct) / ay;
        let r = (u * u + v * v).sqrt();
        if r > 1.0 {
            return 0.0;
        }
        if r > 0.9 {
            return 0.88;
        }
        let mut val = brain
            + 0.04 * (f1 * u * PI + p1).sin() * (f2 * v * PI + p2).cos()
            + 0.03 * (1.0 - r);
        // Ventricles: two small dark ellipses.
        for side in [-1.0, 1.0] {
            let vu = (u - side * 0.15) / vent;
            let vv = (v + 0.05) / (2.2 * vent);
            if vu * vu + vv * vv < 1.0 {
                val = 0.12;
            }
        }
        if lesion {
            let d2 = ((x as f64 - lx).powi(2) + (y as f64 - ly).powi(2)) / (lr * lr);
            val += params.lesion_contrast * (-2.0 * d2).exp();
        }
        val
    })
}

/// Parameters for [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    /// Fraction of slices labelled positive.
    pub prevalence: f64,
    pub width: usize,
    pub height: usize,
    pub phantom: PhantomParams,
    /// Patient-level split fractions for (train, val); the rest is test.
    pub split_fracs: (f64, f64),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_patients: 20,
            slices_per_patient: 5,
            prevalence: 0.3,
            width: 32,
            height: 32,
            phantom: PhantomParams::default(),
            split_fracs: (0.6, 0.1),
            seed: 0,
        }
    }
}

/// Writes PNG phantoms under `dir/images/` and a `dir/manifest.csv`.
///
/// Patients are assigned to splits before slices are generated, so the
/// result never leaks a patient across splits. Labels are assigned by a
/// deterministic shuffle so each split's prevalence is as close to
/// `prevalence` as its size allows.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<Dataset> {
    if spec.n_patients == 0 || spec.slices_per_patient == 0 {
        return Err(Error::invalid("corpus must have at least one slice"));
    }
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let n_train = (spec.n_patients as f64 * spec.split_fracs.0).round() as usize;
    let n_val = (spec.n_patients as f64 * spec.split_fracs.1).round() as usize;

    let mut records = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let patients: Vec<usize> = match split {
            Split::Train => (0..n_train).collect(),
            Split::Val => (n_train..(n_train + n_val).min(spec.n_patients)).collect(),
            Split::Test => ((n_train + n_val).min(spec.n_patients)..spec.n_patients).collect(),
        };
        let n = patients.len() * spec.slices_per_patient;
        let n_pos = (n as f64 * spec.prevalence).round() as usize;
        let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
        labels.shuffle(&mut SeedSpec::new(spec.seed, split as u64).rng());
        let mut k = 0;
        for &p in &patients {
            for s in 0..spec.slices_per_patient {
                let id = format!("p{p:04}_s{s:02}");
                let label = labels[k];
                k += 1;
                let variant = spec.seed.wrapping_mul(1_000_003) ^ ((p * 64 + s) as u64);
                let img = phantom_with(spec.width, spec.height, label == 1, variant, &spec.phantom);
                let rel = format!("images/{id}.png");
                save_image(&img, dir.join(&rel))?;
                records.push(ManifestRecord {
                    id,
                    image_path: rel.into(),
                    label,
                    patient_id: format!("P{p:04}"),
                    split,
                });
            }
        }
    }
    let ds = Dataset::new(records, dir.to_path_buf())?;
    write_manifest(&ds, dir.join("manifest.csv"))?;
    Ok(ds)
}
