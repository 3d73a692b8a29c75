//! Classical denoise-then-classify baseline.
//!
//! A pluggable denoiser feeds a fixed 37-dimensional intensity feature vector
//! (32-bin histogram plus mean, SD and the 10/50/90th percentiles) into an
//! L2-regularised logistic regression trained by full-batch gradient descent
//! from zero initialisation.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{apply_severity, Severity};
use crate::dataset::{augment, AugmentConfig, Dataset, Split};
use crate::dose::{simulate_low_dose, DoseLevel};
use crate::error::{Error, Result};
use crate::image::{clip01, reflect_index, GrayImage};
use crate::iq::{gaussian_taps, iq_result, IqResult, SSIM_WINDOW};
use crate::metrics::{quantile_sorted, Prediction};
use crate::seed::SeedSpec;

pub const HISTOGRAM_BINS: usize = 32;
pub const FEATURE_LEN: usize = HISTOGRAM_BINS + 5;
/// Names the feature layout; its hash is stored with saved models.
pub const FEATURE_SCHEMA: &str = "hist32[0,1]+mean+sd+p10+p50+p90/v1";
const MODEL_FORMAT: &str = "ldct-logreg";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DenoiserSpec {
    Identity,
    Gaussian { sigma: f64 },
    Nlm { patch: usize, window: usize, h: f64 },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Nlm {
            patch: 5,
            window: 11,
            h: 0.1,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DenoiserSpec::Identity => Ok(()),
            DenoiserSpec::Gaussian { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            DenoiserSpec::Nlm { patch, window, h }
                if patch % 2 == 1 && window % 2 == 1 && patch <= window && h > 0.0 =>
            {
                Ok(())
            }
            other => Err(Error::invalid(format!("invalid denoiser {other:?}"))),
        }
    }
}

pub fn denoise(img: &GrayImage, spec: &DenoiserSpec) -> Result<GrayImage> {
    spec.validate()?;
    match *spec {
        DenoiserSpec::Identity => Ok(img.clone()),
        DenoiserSpec::Gaussian { sigma } => gaussian_blur(img, sigma),
        DenoiserSpec::Nlm { patch, window, h } => nl_means(img, patch, window, h),
    }
}

fn check_window(img: &GrayImage, size: usize, what: &str) -> Result<()> {
    if size > img.width() || size > img.height() {
        return Err(Error::invalid(format!(
            "{what} of {size} px exceeds image {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Separable Gaussian blur, radius `ceil(3σ)`, mirror padding.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    let radius = (3.0 * sigma).ceil() as usize;
    let taps = gaussian_taps(2 * radius + 1, sigma);
    check_window(img, taps.len(), "Gaussian kernel")?;
    let (w, h) = (img.width(), img.height());
    let r = radius as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * img.get(reflect_index(x as isize + i as isize - r, w), y))
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[reflect_index(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    clip01(w, h, out)
}

/// Pixelwise non-local means.
///
/// Each pixel becomes a weighted mean over a `window`×`window` search area,
/// weighted by `exp(-d²/h²)` where `d²` is the Gaussian-weighted mean squared
/// difference between the `patch`×`patch` neighbourhoods.
pub fn nl_means(img: &GrayImage, patch: usize, window: usize, h: f64) -> Result<GrayImage> {
    check_window(img, window, "NLM search window")?;
    let (w, ht) = (img.width(), img.height());
    let pr = patch / 2;
    let sr = window / 2;
    // Mirror-padded copy so the inner loops index directly.
    let pad = pr + sr;
    let pw = w + 2 * pad;
    let padded: Vec<f64> = (0..ht + 2 * pad)
        .flat_map(|y| {
            (0..pw).map(move |x| {
                img.get(
                    reflect_index(x as isize - pad as isize, w),
                    reflect_index(y as isize - pad as isize, ht),
                )
            })
        })
        .collect();
    // Patch weights: Gaussian with σ = patch/4, normalised.
    let g = gaussian_taps(patch, (patch as f64 / 4.0).max(0.5));
    let inv_h2 = 1.0 / (h * h);
    let out: Vec<f64> = (0..w * ht)
        .into_par_iter()
        .map(|idx| {
            // Centre of the output pixel in padded coordinates.
            let (x, y) = (idx % w + pad, idx / w + pad);
            let (mut num, mut den) = (0.0, 0.0);
            for qy in y - sr..=y + sr {
                for qx in x - sr..=x + sr {
                    let mut d2 = 0.0;
                    for j in 0..patch {
                        let row_p = (y + j - pr) * pw + x - pr;
                        let row_q = (qy + j - pr) * pw + qx - pr;
                        let mut acc = 0.0;
                        for i in 0..patch {
                            let diff = padded[row_p + i] - padded[row_q + i];
                            acc += g[i] * diff * diff;
                        }
                        d2 += g[j] * acc;
                    }
                    let wgt = (-d2 * inv_h2).exp();
                    num += wgt * padded[qy * pw + qx];
                    den += wgt;
                }
            }
            num / den
        })
        .collect();
    clip01(w, ht, out)
}

/// Fixed-length intensity descriptor of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_LEN || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "feature vector must hold {FEATURE_LEN} finite values"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn histogram(&self) -> &[f64] {
        &self.0[..HISTOGRAM_BINS]
    }

    pub fn mean(&self) -> f64 {
        self.0[HISTOGRAM_BINS]
    }

    pub fn sd(&self) -> f64 {
        self.0[HISTOGRAM_BINS + 1]
    }

    /// 10th, 50th and 90th percentiles.
    pub fn percentiles(&self) -> [f64; 3] {
        [
            self.0[HISTOGRAM_BINS + 2],
            self.0[HISTOGRAM_BINS + 3],
            self.0[HISTOGRAM_BINS + 4],
        ]
    }
}

pub fn extract_features(img: &GrayImage) -> FeatureVector {
    let px = img.pixels();
    let n = px.len() as f64;
    let mut hist = vec![0.0; HISTOGRAM_BINS];
    for &v in px {
        let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        hist[b] += 1.0;
    }
    hist.iter_mut().for_each(|c| *c /= n);
    let mean = img.mean();
    let sd = img.variance().sqrt();
    let mut sorted = px.to_vec();
    sorted.sort_by(f64::total_cmp);
    hist.extend([
        mean,
        sd,
        quantile_sorted(&sorted, 0.1),
        quantile_sorted(&sorted, 0.5),
        quantile_sorted(&sorted, 0.9),
    ]);
    FeatureVector(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_loss: f64,
}

/// Trained classifier. Features are standardised with the training-set
/// mean and scale before the linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub train_meta: TrainMeta,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean binary cross-entropy plus `l2/2 · |w|²` (bias unregularised), and
/// its gradient with respect to `(w, b)`.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: f64,
    xs: &[Vec<f64>],
    ys: &[u8],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(weights, x) + bias;
        let y = y as f64;
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        grad_w.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi);
        grad_b += r;
    }
    loss /= n;
    grad_w.iter_mut().zip(weights).for_each(|(g, w)| *g = *g / n + l2 * w);
    loss += 0.5 * l2 * dot(weights, weights);
    (loss, grad_w, grad_b / n)
}

fn standardizer(features: &[&FeatureVector]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let mut mean = vec![0.0; FEATURE_LEN];
    for f in features {
        mean.iter_mut().zip(f.values()).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; FEATURE_LEN];
    for f in features {
        scale
            .iter_mut()
            .zip(f.values().iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    // Constant features map to zero instead of dividing by zero.
    scale
        .iter_mut()
        .for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    (mean, scale)
}

fn standardize(f: &FeatureVector, mean: &[f64], scale: &[f64]) -> Vec<f64> {
    f.values()
        .iter()
        .zip(mean.iter().zip(scale))
        .map(|(v, (m, s))| (v - m) / s)
        .collect()
}

/// Trains and also returns the loss before each update plus the final loss.
pub fn train_logreg_traced(
    data: &[(FeatureVector, u8)],
    cfg: &LogRegConfig,
) -> Result<(LogRegModel, Vec<f64>)> {
    if data.len() < 2 {
        return Err(Error::invalid("logistic regression needs at least 2 examples"));
    }
    if !data.iter().any(|(_, y)| *y == 1) || !data.iter().any(|(_, y)| *y == 0) {
        return Err(Error::invalid(
            "logistic regression needs both classes in the training set",
        ));
    }
    if !(cfg.learning_rate > 0.0 && cfg.l2 >= 0.0) {
        return Err(Error::invalid(format!("invalid training config {cfg:?}")));
    }
    let refs: Vec<&FeatureVector> = data.iter().map(|(f, _)| f).collect();
    let (mean, scale) = standardizer(&refs);
    let xs: Vec<Vec<f64>> = refs.iter().map(|f| standardize(f, &mean, &scale)).collect();
    let ys: Vec<u8> = data.iter().map(|(_, y)| *y).collect();

    let mut w = vec![0.0; FEATURE_LEN];
    let mut b = 0.0;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, gw, gb) = loss_and_gradient(&w, b, &xs, &ys, cfg.l2);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= cfg.learning_rate * g);
        b -= cfg.learning_rate * gb;
    }
    let model = LogRegModel {
        weights: w,
        bias: b,
        l2: cfg.l2,
        feature_mean: mean,
        feature_scale: scale,
        train_meta: TrainMeta {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            final_loss: *history.last().expect("at least one epoch evaluated"),
        },
    };
    Ok((model, history))
}

pub fn train_logreg(data: &[(FeatureVector, u8)], cfg: &LogRegConfig) -> Result<LogRegModel> {
    train_logreg_traced(data, cfg).map(|(m, _)| m)
}

pub fn predict_logreg(model: &LogRegModel, features: &FeatureVector) -> f64 {
    let x = standardize(features, &model.feature_mean, &model.feature_scale);
    sigmoid(dot(&model.weights, &x) + model.bias)
}

pub fn feature_schema_hash() -> String {
    hex::encode(Sha256::digest(FEATURE_SCHEMA.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    feature_schema: String,
    feature_schema_hash: String,
    model: LogRegModel,
}

pub fn save_model(model: &LogRegModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = ModelDocument {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        feature_schema: FEATURE_SCHEMA.into(),
        feature_schema_hash: feature_schema_hash(),
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LogRegModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ModelDocument = serde_json::from_str(&text)?;
    if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
        return Err(Error::invalid(format!(
            "unsupported model document {} v{}",
            doc.format, doc.version
        )));
    }
    if doc.feature_schema_hash != feature_schema_hash() {
        return Err(Error::invalid(format!(
            "model was trained on feature schema {:?}, this build uses {FEATURE_SCHEMA:?}",
            doc.feature_schema
        )));
    }
    let m = &doc.model;
    if m.weights.len() != FEATURE_LEN
        || m.feature_mean.len() != FEATURE_LEN
        || m.feature_scale.len() != FEATURE_LEN
    {
        return Err(Error::invalid("model parameter vectors have the wrong length"));
    }
    Ok(doc.model)
}

/// How test and training images are degraded before denoising.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    Dose(DoseLevel),
    Severity(Severity),
}

impl Corruption {
    pub fn apply(&self, img: &GrayImage, item_seed: SeedSpec) -> Result<GrayImage> {
        match self {
            Corruption::None => Ok(img.clone()),
            Corruption::Dose(d) => simulate_low_dose(img, *d, item_seed.derive("dose")),
            Corruption::Severity(s) => apply_severity(img, s, item_seed),
        }
    }

    /// Condition tag used in file layouts and reports.
    pub fn tag(&self) -> String {
        match self {
            Corruption::None => "clean".into(),
            Corruption::Dose(d) => format!("dose_{d}"),
            Corruption::Severity(s) => format!("severity_{}", s.level),
        }
    }
}

/// A decoded slice with its manifest metadata.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub patient_id: String,
    pub label: u8,
    pub split: Split,
    pub image: GrayImage,
}

/// Decodes every record of the dataset, in manifest order.
pub fn load_samples(ds: &Dataset) -> Result<Vec<LabeledImage>> {
    ds.records()
        .par_iter()
        .map(|r| {
            Ok(LabeledImage {
                id: r.id.clone(),
                patient_id: r.patient_id.clone(),
                label: r.label,
                split: r.split,
                image: ds.load(r)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub denoiser: DenoiserSpec,
    pub logreg: LogRegConfig,
    /// Training-split augmentation; `None` disables it.
    pub augment: Option<AugmentConfig>,
}


/// Corrupts, augments (training split only) and denoises one sample.
///
/// Corruption noise depends only on `(run_seed, sample id)`, so every
/// pipeline evaluated under the same seed sees the same corrupted input.
pub fn prepare_image(
    sample: &LabeledImage,
    corruption: &Corruption,
    cfg: &BaselineConfig,
    run_seed: u64,
) -> Result<GrayImage> {
    let item = SeedSpec::for_item(run_seed, &sample.id);
    let clean = match (&cfg.augment, sample.split) {
        (Some(aug), Split::Train) => augment(&sample.image, aug, item.derive("augment")),
        _ => sample.image.clone(),
    };
    let corrupted = corruption.apply(&clean, item)?;
    denoise(&corrupted, &cfg.denoiser)
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub predictions: Vec<Prediction>,
    /// Denoised test image vs its clean reference, in prediction order.
    /// Empty when images are too small for SSIM.
    pub test_iq: Vec<IqResult>,
    pub model: LogRegModel,
}

/// Trains on the training split and scores the test split.
pub fn run_baseline(
    samples: &[LabeledImage],
    corruption: &Corruption,
    cfg: &BaselineConfig,
    run_seed: u64,
) -> Result<BaselineRun> {
    cfg.denoiser.validate()?;
    if let Some(a) = &cfg.augment {
        a.validate()?;
    }
    let train: Vec<&LabeledImage> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let test: Vec<&LabeledImage> = samples.iter().filter(|s| s.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::invalid("dataset has no test split"));
    }
    let train_data: Vec<(FeatureVector, u8)> = train
        .par_iter()
        .map(|s| Ok((extract_features(&prepare_image(s, corruption, cfg, run_seed)?), s.label)))
        .collect::<Result<_>>()?;
    let mut logreg = cfg.logreg;
    logreg.seed = run_seed;
    let model = train_logreg(&train_data, &logreg)?;

    let scored: Vec<(Prediction, Option<IqResult>)> = test
        .par_iter()
        .map(|s| {
            let img = prepare_image(s, corruption, cfg, run_seed)?;
            let score = predict_logreg(&model, &extract_features(&img));
            let iq = if img.width() >= SSIM_WINDOW && img.height() >= SSIM_WINDOW {
                Some(iq_result(&s.image, &img)?)
            } else {
                None
            };
            let pred = Prediction::new(s.id.clone(), score, s.label)?.with_patient(&s.patient_id);
            Ok((pred, iq))
        })
        .collect::<Result<_>>()?;
    let (predictions, iq): (Vec<Prediction>, Vec<Option<IqResult>>) = scored.into_iter().unzip();
    Ok(BaselineRun {
        predictions,
        test_iq: iq.into_iter().flatten().collect(),
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedSpec;
    use rand::Rng;

    fn noisy_constant(w: usize, h: usize, level: f64, sigma: f64, seed: u64) -> GrayImage {
        let mut rng = SeedSpec::new(seed, 0).rng();
        GrayImage::from_fn(w, h, |_, _| {
            // Sum of 12 uniforms minus 6 is approximately standard normal.
            let z: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
            level + sigma * z
        })
    }

    #[test]
    fn identity_and_constants() {
        let img = noisy_constant(20, 20, 0.5, 0.05, 1);
        assert_eq!(denoise(&img, &DenoiserSpec::Identity).unwrap(), img);
        let c = GrayImage::filled(20, 20, 0.37).unwrap();
        for spec in [
            DenoiserSpec::Identity,
            DenoiserSpec::Gaussian { sigma: 1.2 },
            DenoiserSpec::Nlm { patch: 3, window: 7, h: 0.1 },
        ] {
            let out = denoise(&c, &spec).unwrap();
            assert!(out.pixels().iter().all(|v| (v - 0.37).abs() < 1e-12), "{spec:?}");
        }
    }

    #[test]
    fn denoisers_reduce_variance_on_noisy_constant() {
        for seed in 0..3 {
            let img = noisy_constant(32, 32, 0.5, 0.05, seed);
            for spec in [
                DenoiserSpec::Gaussian { sigma: 1.0 },
                DenoiserSpec::Nlm { patch: 5, window: 11, h: 0.1 },
            ] {
                let out = denoise(&img, &spec).unwrap();
                assert!(out.variance() < img.variance(), "{spec:?}");
            }
        }
    }

    #[test]
    fn denoiser_validation() {
        let img = GrayImage::filled(8, 8, 0.2).unwrap();
        assert!(denoise(&img, &DenoiserSpec::Nlm { patch: 3, window: 9, h: 0.1 }).is_err());
        assert!(denoise(&img, &DenoiserSpec::Nlm { patch: 5, window: 3, h: 0.1 }).is_err());
        assert!(denoise(&img, &DenoiserSpec::Nlm { patch: 4, window: 7, h: 0.1 }).is_err());
        assert!(denoise(&img, &DenoiserSpec::Gaussian { sigma: 0.0 }).is_err());
        assert!(denoise(&img, &DenoiserSpec::Gaussian { sigma: 5.0 }).is_err());
    }

    #[test]
    fn features_of_degenerate_images() {
        let f = extract_features(&GrayImage::filled(10, 10, 0.5).unwrap());
        assert_eq!(f.values().len(), FEATURE_LEN);
        assert_eq!(f.histogram().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(f.histogram()[16], 1.0);
        assert_eq!((f.mean(), f.sd()), (0.5, 0.0));
        assert_eq!(f.percentiles(), [0.5, 0.5, 0.5]);

        let half = GrayImage::from_fn(10, 10, |x, _| if x < 5 { 0.0 } else { 1.0 });
        let f = extract_features(&half);
        assert_eq!((f.histogram()[0], f.histogram()[31]), (0.5, 0.5));
        assert_eq!((f.mean(), f.sd()), (0.5, 0.5));
        assert!((f.histogram().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn percentiles_match_sort_oracle() {
        let img = noisy_constant(17, 13, 0.5, 0.15, 4);
        let mut v = img.pixels().to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let i = pos as usize;
            v[i] + (v[(i + 1).min(v.len() - 1)] - v[i]) * (pos - i as f64)
        };
        let f = extract_features(&img);
        for (got, q) in f.percentiles().iter().zip([0.1, 0.5, 0.9]) {
            assert!((got - oracle(q)).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_cases() {
        let model = LogRegModel {
            weights: vec![0.0; FEATURE_LEN],
            bias: 0.0,
            l2: 0.0,
            feature_mean: vec![0.0; FEATURE_LEN],
            feature_scale: vec![1.0; FEATURE_LEN],
            train_meta: TrainMeta { epochs: 0, learning_rate: 0.1, seed: 0, final_loss: 0.0 },
        };
        let f = extract_features(&GrayImage::filled(4, 4, 0.3).unwrap());
        assert_eq!(predict_logreg(&model, &f), 0.5);
        let hot = LogRegModel { bias: 20.0, ..model.clone() };
        assert!(predict_logreg(&hot, &f) > 0.9999);

        let mut rng = SeedSpec::new(6, 0).rng();
        let rand_model = LogRegModel {
            weights: (0..FEATURE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: 0.3,
            feature_mean: (0..FEATURE_LEN).map(|_| rng.random_range(-0.1..0.1)).collect(),
            feature_scale: (0..FEATURE_LEN).map(|_| rng.random_range(0.5..2.0)).collect(),
            ..model
        };
        let z: f64 = f
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| rand_model.weights[i] * (v - rand_model.feature_mean[i]) / rand_model.feature_scale[i])
            .sum::<f64>()
            + 0.3;
        let direct = 1.0 / (1.0 + (-z).exp());
        assert!((predict_logreg(&rand_model, &f) - direct).abs() < 1e-12);
    }

    fn synthetic_features(n: usize, seed: u64, separation: f64) -> Vec<(FeatureVector, u8)> {
        let mut rng = SeedSpec::new(seed, 0).rng();
        (0..n)
            .map(|i| {
                let y = (i % 2) as u8;
                let mut v: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random::<f64>() * 0.1).collect();
                v[HISTOGRAM_BINS] += separation * y as f64 + rng.random::<f64>() * 0.2;
                (FeatureVector::new(v).unwrap(), y)
            })
            .collect()
    }

    #[test]
    fn separable_set_trains_to_high_auc() {
        let data = synthetic_features(200, 1, 1.0);
        let (model, history) = train_logreg_traced(&data, &LogRegConfig::default()).unwrap();
        assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        let preds: Vec<Prediction> = data
            .iter()
            .enumerate()
            .map(|(i, (f, y))| Prediction::new(i.to_string(), predict_logreg(&model, f), *y).unwrap())
            .collect();
        assert!(crate::metrics::roc_auc(&preds).unwrap() > 0.99);
    }

    #[test]
    fn heavy_regularisation_gives_prevalence() {
        let mut data = synthetic_features(100, 2, 1.0);
        // 25 positives out of 100.
        for (i, d) in data.iter_mut().enumerate() {
            d.1 = u8::from(i < 25);
        }
        let strong = LogRegConfig { l2: 1e3, learning_rate: 1e-3, epochs: 20_000, ..Default::default() };
        let model = train_logreg(&data, &strong).unwrap();
        assert!(model.weights.iter().all(|w| w.abs() < 1e-3));
        let p = predict_logreg(&model, &data[0].0);
        assert!((p - 0.25).abs() < 0.01, "{p}");
    }

    #[test]
    fn training_errors() {
        let data = synthetic_features(10, 3, 1.0);
        let one_class: Vec<_> = data.iter().filter(|d| d.1 == 1).cloned().collect();
        assert!(train_logreg(&one_class, &LogRegConfig::default()).is_err());
        assert!(train_logreg(&data[..1], &LogRegConfig::default()).is_err());
        let wild = LogRegConfig { learning_rate: 1e300, ..Default::default() };
        assert!(matches!(train_logreg(&data, &wild), Err(Error::Diverged { .. })));
    }

    #[test]
    fn model_json_roundtrip_and_schema_check() {
        let data = synthetic_features(40, 5, 1.0);
        let model = train_logreg(&data, &LogRegConfig { epochs: 20, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        save_model(&model, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model);
        let tampered = fs::read_to_string(&p)
            .unwrap()
            .replace(&feature_schema_hash(), "deadbeef");
        fs::write(&p, tampered).unwrap();
        assert!(load_model(&p).is_err());
    }
}
