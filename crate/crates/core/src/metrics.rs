//! Binary classification metrics and their uncertainty.
//!
//! Threshold metrics use the inclusive rule `score >= threshold` for a
//! positive call. Ratios with a zero denominator are `None`, never 0 or NaN,
//! so a collapsed sensitivity of 0.0 stays distinguishable from "no positives".

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::seed::SeedSpec;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 2000;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_CI_LEVEL: f64 = 0.95;

/// Anything carrying a probability score and a binary label.
pub trait Scored {
    fn score(&self) -> f64;
    fn label(&self) -> u8;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

impl Prediction {
    pub fn new(id: impl Into<String>, score: f64, label: u8) -> Result<Self> {
        let id = id.into();
        if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
            return Err(Error::invalid(format!(
                "prediction {id}: score {score} outside [0,1]"
            )));
        }
        if label > 1 {
            return Err(Error::invalid(format!(
                "prediction {id}: label {label} is not 0 or 1"
            )));
        }
        Ok(Self {
            id,
            score,
            label,
            patient_id: None,
        })
    }

    pub fn with_patient(mut self, patient_id: impl Into<String>) -> Self {
        self.patient_id = Some(patient_id.into());
        self
    }
}

impl Scored for Prediction {
    fn score(&self) -> f64 {
        self.score
    }
    fn label(&self) -> u8 {
        self.label
    }
}

/// Lightweight copyable (score, label) pair used inside resampling loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLabel {
    pub score: f64,
    pub label: u8,
}

impl Scored for ScoreLabel {
    fn score(&self) -> f64 {
        self.score
    }
    fn label(&self) -> u8 {
        self.label
    }
}

pub fn to_score_labels<P: Scored>(preds: &[P]) -> Vec<ScoreLabel> {
    preds
        .iter()
        .map(|p| ScoreLabel {
            score: p.score(),
            label: p.label(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion<P: Scored>(preds: &[P], threshold: f64) -> Result<ConfusionCounts> {
    if preds.is_empty() {
        return Err(Error::invalid("confusion matrix of an empty prediction set"));
    }
    let mut c = ConfusionCounts::default();
    for p in preds {
        match (p.score() >= threshold, p.label() == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn threshold_metrics(c: &ConfusionCounts) -> Result<ThresholdMetrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::invalid("threshold metrics of an empty confusion matrix"));
    }
    Ok(ThresholdMetrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    })
}

/// 1-based average ranks of `values`; ties share the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn class_counts<P: Scored>(preds: &[P]) -> (usize, usize) {
    let pos = preds.iter().filter(|p| p.label() == 1).count();
    (pos, preds.len() - pos)
}

/// Mann-Whitney AUC with half credit for ties.
pub fn roc_auc<P: Scored>(preds: &[P]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(preds);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score()).collect();
    let ranks = midranks(&scores);
    let rank_sum: f64 = preds
        .iter()
        .zip(&ranks)
        .filter(|(p, _)| p.label() == 1)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// DeLong structural components.
///
/// `v10[i]` is the fraction of negatives the `i`-th positive outscores (ties
/// count half); `v01[j]` is the fraction of positives outscoring the `j`-th
/// negative. Both are in input order within their class.
#[derive(Debug, Clone, PartialEq)]
pub struct DelongComponents {
    pub auc: f64,
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

impl DelongComponents {
    pub fn variance(&self) -> f64 {
        let var = |xs: &[f64]| {
            xs.iter().map(|x| (x - self.auc).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        var(&self.v10) / self.v10.len() as f64 + var(&self.v01) / self.v01.len() as f64
    }

    pub fn std_error(&self) -> f64 {
        self.variance().max(0.0).sqrt()
    }
}

/// Components via midranks: overall rank minus within-class rank counts the
/// other class's members below (ties half), in `O(n log n)`.
pub fn delong_components<P: Scored>(preds: &[P]) -> Result<DelongComponents> {
    let (n_pos, n_neg) = class_counts(preds);
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::Undefined(format!(
            "DeLong variance needs >= 2 per class, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let all: Vec<f64> = preds.iter().map(|p| p.score()).collect();
    let pos: Vec<f64> = preds.iter().filter(|p| p.label() == 1).map(|p| p.score()).collect();
    let neg: Vec<f64> = preds.iter().filter(|p| p.label() == 0).map(|p| p.score()).collect();
    let r_all = midranks(&all);
    let r_pos = midranks(&pos);
    let r_neg = midranks(&neg);
    let (mut v10, mut v01) = (Vec::with_capacity(n_pos), Vec::with_capacity(n_neg));
    let (mut ip, mut ineg) = (0, 0);
    for (p, r) in preds.iter().zip(&r_all) {
        if p.label() == 1 {
            v10.push((r - r_pos[ip]) / n_neg as f64);
            ip += 1;
        } else {
            v01.push(1.0 - (r - r_neg[ineg]) / n_pos as f64);
            ineg += 1;
        }
    }
    let auc = v10.iter().sum::<f64>() / n_pos as f64;
    Ok(DelongComponents { auc, v10, v01 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Bootstrap,
    Delong,
    None,
}

/// A point estimate with an optional confidence interval.
///
/// Percentile bootstrap intervals are not forced to contain the point
/// estimate, so `ci_low <= point <= ci_high` holds for DeLong but may fail
/// for a skewed bootstrap distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWithCi {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: CiMethod,
    pub n_resamples_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
}

impl MetricWithCi {
    pub fn point_only(point: f64) -> Self {
        Self {
            point,
            ci_low: point,
            ci_high: point,
            method: CiMethod::None,
            n_resamples_used: 0,
            std_error: None,
        }
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("CI level must be in (0,1), got {level}")));
    }
    Ok(())
}

/// Two-sided standard-normal critical value for `level`.
pub fn z_critical(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// AUC with a DeLong normal-approximation interval, truncated to `[0, 1]`.
pub fn delong_auc_ci<P: Scored>(preds: &[P], level: f64) -> Result<MetricWithCi> {
    check_level(level)?;
    let comps = delong_components(preds)?;
    let se = comps.std_error();
    let z = z_critical(level);
    Ok(MetricWithCi {
        point: comps.auc,
        ci_low: (comps.auc - z * se).max(0.0),
        ci_high: (comps.auc + z * se).min(1.0),
        method: CiMethod::Delong,
        n_resamples_used: 0,
        std_error: Some(se),
    })
}

/// Linear-interpolation quantile of sorted data (numpy's default).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap CI with image-level resampling.
///
/// Resample `i` draws from `seed.derive_index(i)`, so results do not depend
/// on thread scheduling. Resamples where `metric` is undefined are skipped;
/// `n_resamples_used` counts the rest.
pub fn bootstrap_ci<P, F>(
    metric: F,
    preds: &[P],
    n_resamples: usize,
    level: f64,
    seed: SeedSpec,
) -> Result<MetricWithCi>
where
    P: Scored,
    F: Fn(&[ScoreLabel]) -> Option<f64> + Sync,
{
    check_level(level)?;
    if preds.is_empty() {
        return Err(Error::invalid("bootstrap of an empty prediction set"));
    }
    if n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    let base = to_score_labels(preds);
    let point = metric(&base)
        .ok_or_else(|| Error::Undefined("metric undefined on the full prediction set".into()))?;
    let n = base.len();
    let mut stats: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.derive_index(i as u64).rng();
            let sample: Vec<ScoreLabel> = (0..n).map(|_| base[rng.random_range(0..n)]).collect();
            metric(&sample)
        })
        .collect::<Vec<Option<f64>>>()
        .into_iter()
        .flatten()
        .collect();
    if stats.is_empty() {
        return Err(Error::Undefined(format!(
            "metric undefined on all {n_resamples} bootstrap resamples"
        )));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(MetricWithCi {
        point,
        ci_low: quantile_sorted(&stats, alpha),
        ci_high: quantile_sorted(&stats, 1.0 - alpha),
        method: CiMethod::Bootstrap,
        n_resamples_used: stats.len(),
        std_error: None,
    })
}

/// Expected calibration error over `n_bins` equal-width bins of the
/// positive-class probability. Bins are left-closed; the last is also
/// right-closed.
pub fn ece<P: Scored>(preds: &[P], n_bins: usize) -> Result<f64> {
    if n_bins < 1 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    if preds.is_empty() {
        return Err(Error::invalid("ECE of an empty prediction set"));
    }
    let mut count = vec![0usize; n_bins];
    let mut score_sum = vec![0.0; n_bins];
    let mut label_sum = vec![0.0; n_bins];
    for p in preds {
        let b = ((p.score() * n_bins as f64).floor() as usize).min(n_bins - 1);
        count[b] += 1;
        score_sum[b] += p.score();
        label_sum[b] += p.label() as f64;
    }
    let total = preds.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            (n / total) * (label_sum[b] / n - score_sum[b] / n).abs()
        })
        .sum())
}

/// `corrupt - baseline`; negative means the corruption hurt.
pub fn robustness_delta(corrupt: f64, baseline: f64) -> Result<f64> {
    if !corrupt.is_finite() || !baseline.is_finite() {
        return Err(Error::Undefined(format!(
            "robustness delta of undefined values ({corrupt}, {baseline})"
        )));
    }
    Ok(corrupt - baseline)
}

/// Mean and unbiased standard deviation across repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    /// `None` for a single run.
    pub sd: Option<f64>,
    pub n_runs: usize,
}

pub fn aggregate_runs(per_run: &[f64]) -> Result<RunSummary> {
    if per_run.is_empty() {
        return Err(Error::invalid("cannot aggregate zero runs"));
    }
    let n = per_run.len() as f64;
    let rough = per_run.iter().sum::<f64>() / n;
    // One refinement pass removes the rounding error of the plain sum.
    let mean = rough + per_run.iter().map(|x| x - rough).sum::<f64>() / n;
    let sd = (per_run.len() > 1)
        .then(|| (per_run.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(RunSummary {
        mean,
        sd,
        n_runs: per_run.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolRule {
    #[default]
    Max,
    Mean,
}

/// Collapses slices to one prediction per patient, sorted by patient id.
/// A patient is positive if any slice is; the score is the max or mean.
pub fn pool_by_patient(preds: &[Prediction], rule: PoolRule) -> Result<Vec<Prediction>> {
    let mut groups: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in preds {
        let pid = p.patient_id.as_deref().ok_or_else(|| {
            Error::invalid(format!("prediction {} has no patient id for pooling", p.id))
        })?;
        groups.entry(pid).or_default().push(p);
    }
    Ok(groups
        .into_iter()
        .map(|(pid, ps)| {
            let score = match rule {
                PoolRule::Max => ps.iter().map(|p| p.score).fold(0.0, f64::max),
                PoolRule::Mean => ps.iter().map(|p| p.score).sum::<f64>() / ps.len() as f64,
            };
            Prediction {
                id: pid.to_string(),
                score,
                label: ps.iter().map(|p| p.label).max().unwrap_or(0),
                patient_id: Some(pid.to_string()),
            }
        })
        .collect())
}
