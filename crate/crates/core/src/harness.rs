//! Benchmark orchestration: configuration, score-file interop, report
//! assembly and rendering.
//!
//! Every command is a plain function over a [`RunConfig`] and a [`Dataset`];
//! the CLI crate only parses arguments and writes files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{SeverityRow, SeveritySchedule};
use crate::baseline::{
    load_samples, run_baseline, save_model, BaselineConfig, Corruption, FEATURE_SCHEMA,
};
use crate::dataset::{Dataset, Split};
use crate::dose::{simulate_low_dose, DoseLevel};
use crate::error::{Error, Result};
use crate::image::save_image;
use crate::iq::{iq_result, summarize_iq, IqResult, IqSummary};
use crate::metrics::{
    aggregate_runs, bootstrap_ci, confusion, delong_auc_ci, ece, pool_by_patient,
    quantile_sorted, robustness_delta, roc_auc, threshold_metrics, ConfusionCounts,
    MetricWithCi, PoolRule, Prediction, ScoreLabel, ThresholdMetrics, DEFAULT_BOOTSTRAP_RESAMPLES,
    DEFAULT_CI_LEVEL, DEFAULT_ECE_BINS, DEFAULT_THRESHOLD,
};
use crate::seed::SeedSpec;
use crate::synthetic::phantom;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SCORE_HEADER: [&str; 2] = ["id", "score"];
pub const DEFAULT_SEEDS: [u64; 3] = [7, 17, 27];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub image_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 20,
            image_size: 128,
        }
    }
}

/// Declarative run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub doses: Vec<DoseLevel>,
    pub severities: Vec<u8>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    /// Bootstrap resamples per interval; 0 disables bootstrap intervals.
    pub bootstrap_n: usize,
    pub ece_bins: usize,
    pub ci_level: f64,
    /// Patient-level pooling for `eval`; slice-level when absent.
    pub pool: Option<PoolRule>,
    /// Adds an uncorrupted condition to `baseline` runs and uses it as the
    /// reference for deltas.
    pub include_clean: bool,
    pub schedule: SeveritySchedule,
    pub baseline: BaselineConfig,
    pub bench: BenchConfig,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            doses: DoseLevel::defaults(),
            severities: vec![1, 2, 3, 4, 5],
            seeds: DEFAULT_SEEDS.to_vec(),
            threshold: DEFAULT_THRESHOLD,
            bootstrap_n: DEFAULT_BOOTSTRAP_RESAMPLES,
            ece_bins: DEFAULT_ECE_BINS,
            ci_level: DEFAULT_CI_LEVEL,
            pool: None,
            include_clean: true,
            schedule: SeveritySchedule::default(),
            baseline: BaselineConfig::default(),
            bench: BenchConfig::default(),
            manifest: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.doses.is_empty() {
            return Err(Error::invalid("config: dose list is empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("config: seed list is empty"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "config: threshold {} outside (0,1)",
                self.threshold
            )));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::invalid(format!(
                "config: ci_level {} outside (0,1)",
                self.ci_level
            )));
        }
        if self.ece_bins == 0 {
            return Err(Error::invalid("config: ece_bins must be positive"));
        }
        if self.bench.repetitions < 20 || self.bench.image_size < 11 {
            return Err(Error::invalid(
                "config: bench needs >= 20 repetitions and images of at least 11 px",
            ));
        }
        let dup = |v: Vec<String>| v.len() != v.iter().collect::<BTreeSet<_>>().len();
        if dup(self.seeds.iter().map(u64::to_string).collect()) {
            return Err(Error::invalid("config: duplicate seeds"));
        }
        if dup(self.doses.iter().map(DoseLevel::to_string).collect()) {
            return Err(Error::invalid("config: duplicate doses"));
        }
        self.schedule.validate()?;
        for &s in &self.severities {
            self.schedule.severity(s)?;
        }
        self.baseline.denoiser.validate()?;
        if let Some(a) = &self.baseline.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding input/output paths.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            manifest: None,
            out: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub severity_table: Vec<SeverityRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_schema: Option<String>,
}

impl Provenance {
    fn new(cfg: &RunConfig, command: &str, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            config_hash: cfg.hash(),
            seeds,
            threshold: cfg.threshold,
            severity_table: cfg.schedule.levels.clone(),
            feature_schema: None,
        }
    }
}

/// All metrics of one scored prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: Option<u64>,
    pub n: usize,
    pub n_positive: usize,
    pub confusion: ConfusionCounts,
    pub threshold_metrics: ThresholdMetrics,
    pub auc: Option<f64>,
    pub auc_delong: Option<MetricWithCi>,
    pub auc_bootstrap: Option<MetricWithCi>,
    pub accuracy_bootstrap: Option<MetricWithCi>,
    pub ece: f64,
}

/// Mean and SD across runs of the runs where the metric is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n_defined: usize,
}

impl Stat {
    fn from_runs(values: impl IntoIterator<Item = Option<f64>>) -> Result<Self> {
        let defined: Vec<f64> = values.into_iter().flatten().collect();
        if defined.is_empty() {
            return Ok(Self { mean: None, sd: None, n_defined: 0 });
        }
        let s = aggregate_runs(&defined)?;
        Ok(Self {
            mean: Some(s.mean),
            sd: s.sd,
            n_defined: s.n_runs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    /// Predictions per run.
    pub n: usize,
    pub n_runs: usize,
    pub iq: Option<IqSummary>,
    pub accuracy: Stat,
    pub sensitivity: Stat,
    pub specificity: Stat,
    pub precision: Stat,
    pub f1: Stat,
    pub auc: Stat,
    pub ece: Stat,
    pub runs: Vec<RunMetrics>,
    pub delta_auc: Option<f64>,
    pub delta_acc: Option<f64>,
}

impl ReportRow {
    pub fn from_runs(condition: impl Into<String>, runs: Vec<RunMetrics>, iq: Option<IqSummary>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::invalid("report row needs at least one run"))?;
        let tm = |f: fn(&ThresholdMetrics) -> Option<f64>| {
            Stat::from_runs(runs.iter().map(|r| f(&r.threshold_metrics)))
        };
        Ok(Self {
            condition: condition.into(),
            n: first.n,
            n_runs: runs.len(),
            iq,
            accuracy: tm(|t| Some(t.accuracy))?,
            sensitivity: tm(|t| t.sensitivity)?,
            specificity: tm(|t| t.specificity)?,
            precision: tm(|t| t.precision)?,
            f1: tm(|t| t.f1)?,
            auc: Stat::from_runs(runs.iter().map(|r| r.auc))?,
            ece: Stat::from_runs(runs.iter().map(|r| Some(r.ece)))?,
            runs,
            delta_auc: None,
            delta_acc: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    /// Condition the deltas are measured against.
    pub baseline_condition: Option<String>,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    /// Fills `delta_auc` / `delta_acc` of every row against `baseline`.
    pub fn set_baseline(&mut self, baseline: &str) -> Result<()> {
        let base = self
            .rows
            .iter()
            .find(|r| r.condition == baseline)
            .ok_or_else(|| Error::invalid(format!("no report row for baseline {baseline:?}")))?;
        let (auc0, acc0) = (base.auc.mean, base.accuracy.mean);
        for row in &mut self.rows {
            row.delta_auc = delta(row.auc.mean, auc0)?;
            row.delta_acc = delta(row.accuracy.mean, acc0)?;
        }
        self.baseline_condition = Some(baseline.into());
        Ok(())
    }

    pub fn row(&self, condition: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }
}

fn delta(corrupt: Option<f64>, base: Option<f64>) -> Result<Option<f64>> {
    match (corrupt, base) {
        (Some(c), Some(b)) => robustness_delta(c, b).map(Some),
        _ => Ok(None),
    }
}

fn undefined_to_none(r: Result<MetricWithCi>) -> Result<Option<MetricWithCi>> {
    match r {
        Ok(m) => Ok(Some(m)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Threshold metrics, AUC with DeLong and bootstrap intervals, and ECE.
pub fn compute_run_metrics(preds: &[Prediction], cfg: &RunConfig, seed: u64) -> Result<RunMetrics> {
    let counts = confusion(preds, cfg.threshold)?;
    let tm = threshold_metrics(&counts)?;
    let auc = roc_auc(preds).ok();
    let auc_delong = match auc {
        Some(_) => undefined_to_none(delong_auc_ci(preds, cfg.ci_level))?,
        None => None,
    };
    let boot_seed = SeedSpec::new(seed, 0).derive("bootstrap");
    let (auc_bootstrap, accuracy_bootstrap) = if cfg.bootstrap_n == 0 {
        (None, None)
    } else {
        let auc_fn = |s: &[ScoreLabel]| roc_auc(s).ok();
        let threshold = cfg.threshold;
        let acc_fn = move |s: &[ScoreLabel]| {
            confusion(s, threshold)
                .and_then(|c| threshold_metrics(&c))
                .ok()
                .map(|t| t.accuracy)
        };
        let a = match auc {
            Some(_) => undefined_to_none(bootstrap_ci(
                auc_fn,
                preds,
                cfg.bootstrap_n,
                cfg.ci_level,
                boot_seed.derive("auc"),
            ))?,
            None => None,
        };
        let b = undefined_to_none(bootstrap_ci(
            acc_fn,
            preds,
            cfg.bootstrap_n,
            cfg.ci_level,
            boot_seed.derive("accuracy"),
        ))?;
        (a, b)
    };
    Ok(RunMetrics {
        seed: Some(seed),
        n: preds.len(),
        n_positive: preds.iter().filter(|p| p.label == 1).count(),
        confusion: counts,
        threshold_metrics: tm,
        auc,
        auc_delong,
        auc_bootstrap,
        accuracy_bootstrap,
        ece: ece(preds, cfg.ece_bins)?,
    })
}

/// Reads a score CSV with header `id,score`.
pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let line_err = |line: u64, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => line_err(1, format!("{other:?}")),
        })?;
    let header = rdr.headers().map_err(|e| line_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != SCORE_HEADER {
        return Err(line_err(
            1,
            format!("expected header id,score, found {}", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| line_err(line, e.to_string()))?;
        if rec.len() != 2 {
            return Err(line_err(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let score: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| line_err(line, format!("score {:?} is not a number", &rec[1])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(line_err(line, format!("score {score} outside [0,1]")));
        }
        out.push((rec[0].to_string(), score));
    }
    Ok(out)
}

/// Writes `id,score` rows in the given order.
pub fn write_scores(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("id,score\n");
    for p in preds {
        let _ = writeln!(text, "{},{}", p.id, p.score);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn list(ids: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        let _ = write!(s, " (+{} more)", ids.len() - SHOWN);
    }
    s
}

/// Joins scores to test-split labels. The score ids must be exactly the
/// test-split ids, each once; the result follows manifest order.
pub fn join_scores(scores: &[(String, f64)], ds: &Dataset) -> Result<Vec<Prediction>> {
    let mut by_id: HashMap<&str, f64> = HashMap::new();
    let mut duplicates = Vec::new();
    for (id, s) in scores {
        if by_id.insert(id, *s).is_some() {
            duplicates.push(id.clone());
        }
    }
    let all: HashMap<&str, Split> = ds.records().iter().map(|r| (r.id.as_str(), r.split)).collect();
    let mut problems = Vec::new();
    if !duplicates.is_empty() {
        problems.push(format!("duplicate ids: {}", list(&duplicates)));
    }
    let mut extra = Vec::new();
    let mut not_test = Vec::new();
    for (id, _) in scores {
        match all.get(id.as_str()) {
            None => extra.push(id.clone()),
            Some(Split::Test) => {}
            Some(_) => not_test.push(id.clone()),
        }
    }
    if !extra.is_empty() {
        problems.push(format!("ids not in manifest: {}", list(&extra)));
    }
    if !not_test.is_empty() {
        problems.push(format!("ids outside the test split: {}", list(&not_test)));
    }
    let missing: Vec<String> = ds
        .split(Split::Test)
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        problems.push(format!("missing test ids: {}", list(&missing)));
    }
    if !problems.is_empty() {
        return Err(Error::invalid(format!("score file: {}", problems.join("; "))));
    }
    ds.split(Split::Test)
        .map(|r| Ok(Prediction::new(r.id.clone(), by_id[r.id.as_str()], r.label)?.with_patient(&r.patient_id)))
        .collect()
}

fn eval_predictions(preds: Vec<Prediction>, cfg: &RunConfig) -> Result<Vec<Prediction>> {
    match cfg.pool {
        Some(rule) => pool_by_patient(&preds, rule),
        None => Ok(preds),
    }
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(DEFAULT_SEEDS[0])
}

/// Full metric suite for one external score file on the test split.
pub fn cmd_eval(cfg: &RunConfig, ds: &Dataset, scores: impl AsRef<Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    ds.require_clean_splits()?;
    let preds = eval_predictions(join_scores(&read_scores(scores)?, ds)?, cfg)?;
    let seed = first_seed(cfg);
    let condition = if cfg.pool.is_some() { "eval_patient" } else { "eval" };
    let row = ReportRow::from_runs(condition, vec![compute_run_metrics(&preds, cfg, seed)?], None)?;
    Ok(MetricsReport {
        provenance: Provenance::new(cfg, "eval", vec![seed]),
        baseline_condition: None,
        rows: vec![row],
    })
}

pub const STRESS_BASELINE: &str = "baseline";

/// Per-severity metrics plus ΔAUC(s), ΔAcc(s) against the baseline file.
/// `per_severity` must hold exactly the configured severities.
pub fn cmd_stress(
    cfg: &RunConfig,
    ds: &Dataset,
    baseline: impl AsRef<Path>,
    per_severity: &BTreeMap<u8, PathBuf>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    ds.require_clean_splits()?;
    let wanted: BTreeSet<u8> = cfg.severities.iter().copied().collect();
    let given: BTreeSet<u8> = per_severity.keys().copied().collect();
    if let Some(s) = wanted.difference(&given).next() {
        return Err(Error::invalid(format!("missing score file for severity {s}")));
    }
    if let Some(s) = given.difference(&wanted).next() {
        return Err(Error::invalid(format!(
            "score file given for severity {s}, which is not in the configured severities"
        )));
    }
    let seed = first_seed(cfg);
    let metrics_for = |path: &Path| -> Result<RunMetrics> {
        let preds = eval_predictions(join_scores(&read_scores(path)?, ds)?, cfg)?;
        compute_run_metrics(&preds, cfg, seed)
    };
    let mut rows = vec![ReportRow::from_runs(STRESS_BASELINE, vec![metrics_for(baseline.as_ref())?], None)?];
    for (s, path) in per_severity {
        rows.push(ReportRow::from_runs(format!("severity_{s}"), vec![metrics_for(path)?], None)?);
    }
    let mut report = MetricsReport {
        provenance: Provenance::new(cfg, "stress", vec![seed]),
        baseline_condition: None,
        rows,
    };
    report.set_baseline(STRESS_BASELINE)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptMode {
    Dose,
    Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptProvenance {
    pub tool_version: String,
    pub config_hash: String,
    pub mode: CorruptMode,
    pub conditions: Vec<String>,
    pub seeds: Vec<u64>,
    pub severity_table: Vec<SeverityRow>,
    pub ring_bands: crate::artifact::RingBandConfig,
    pub n_images: usize,
    pub n_files: usize,
}

fn corruptions(cfg: &RunConfig, mode: CorruptMode) -> Result<Vec<Corruption>> {
    match mode {
        CorruptMode::Dose => Ok(cfg.doses.iter().map(|d| Corruption::Dose(*d)).collect()),
        CorruptMode::Severity => cfg
            .severities
            .iter()
            .map(|s| Ok(Corruption::Severity(cfg.schedule.severity(*s)?)))
            .collect(),
    }
}

fn check_file_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::invalid(format!("id {id:?} cannot be used as a file name")));
    }
    Ok(())
}

/// Materialises corrupted copies of every manifest image under
/// `<out>/<condition>/seed_<s>/<id>.png`, plus `<out>/provenance.json`.
///
/// The noise for an image depends only on `(seed, id)`, so these files are
/// exactly what `baseline` sees for the same configuration.
pub fn cmd_corrupt(cfg: &RunConfig, ds: &Dataset, out: &Path, mode: CorruptMode) -> Result<CorruptProvenance> {
    cfg.validate()?;
    for r in ds.records() {
        check_file_id(&r.id)?;
    }
    let conds = corruptions(cfg, mode)?;
    let mut n_files = 0;
    for c in &conds {
        for &seed in &cfg.seeds {
            let dir = out.join(c.tag()).join(format!("seed_{seed}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let images = ds
                .records()
                .par_iter()
                .map(|r| c.apply(&ds.load(r)?, SeedSpec::for_item(seed, &r.id)))
                .collect::<Result<Vec<_>>>()?;
            for (r, img) in ds.records().iter().zip(&images) {
                save_image(img, dir.join(format!("{}.png", r.id)))?;
                n_files += 1;
            }
        }
    }
    let prov = CorruptProvenance {
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        mode,
        conditions: conds.iter().map(Corruption::tag).collect(),
        seeds: cfg.seeds.clone(),
        severity_table: cfg.schedule.levels.clone(),
        ring_bands: cfg.schedule.ring_bands,
        n_images: ds.records().len(),
        n_files,
    };
    let path = out.join("provenance.json");
    let text = serde_json::to_string_pretty(&prov)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(prov)
}

/// Runs the classical baseline for every dose (and the clean condition when
/// enabled) and every seed. Score files go to
/// `<out>/scores/<condition>/seed_<s>.csv`, models next to them under
/// `<out>/models/`.
pub fn cmd_baseline(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    ds.require_clean_splits()?;
    let samples = load_samples(ds)?;
    let mut conds = Vec::new();
    if cfg.include_clean {
        conds.push(Corruption::None);
    }
    conds.extend(cfg.doses.iter().map(|d| Corruption::Dose(*d)));

    let mut rows = Vec::new();
    for c in &conds {
        let tag = c.tag();
        let score_dir = out.join("scores").join(&tag);
        let model_dir = out.join("models").join(&tag);
        for d in [&score_dir, &model_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut runs = Vec::new();
        let mut iq: Vec<IqResult> = Vec::new();
        for &seed in &cfg.seeds {
            let run = run_baseline(&samples, c, &cfg.baseline, seed)?;
            write_scores(score_dir.join(format!("seed_{seed}.csv")), &run.predictions)?;
            save_model(&run.model, model_dir.join(format!("seed_{seed}.json")))?;
            runs.push(compute_run_metrics(&run.predictions, cfg, seed)?);
            iq.extend(run.test_iq);
        }
        rows.push(ReportRow::from_runs(tag, runs, summarize_iq(&iq))?);
    }
    let mut provenance = Provenance::new(cfg, "baseline", cfg.seeds.clone());
    provenance.feature_schema = Some(FEATURE_SCHEMA.into());
    let mut report = MetricsReport {
        provenance,
        baseline_condition: None,
        rows,
    };
    if cfg.include_clean {
        report.set_baseline(&Corruption::None.tag())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::invalid(format!(
                "unknown report format {other:?} (expected csv, json or svg)"
            ))),
        }
    }
}

pub const CSV_COLUMNS: &[&str] = &[
    "report",
    "condition",
    "n",
    "n_runs",
    "accuracy_mean",
    "accuracy_sd",
    "sensitivity_mean",
    "sensitivity_sd",
    "specificity_mean",
    "specificity_sd",
    "precision_mean",
    "precision_sd",
    "f1_mean",
    "f1_sd",
    "auc_mean",
    "auc_sd",
    "auc_delong_low",
    "auc_delong_high",
    "auc_boot_low",
    "auc_boot_high",
    "accuracy_boot_low",
    "accuracy_boot_high",
    "ece_mean",
    "ece_sd",
    "psnr_db",
    "ssim",
    "mse",
    "delta_auc",
    "delta_acc",
    "config_hash",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV line per report row. Interval columns are filled for single-run
/// rows only; multi-run rows carry mean and SD.
pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = CSV_COLUMNS.join(",") + "\n";
    for (i, rep) in reports.iter().enumerate() {
        for row in &rep.rows {
            let single = (row.n_runs == 1).then(|| &row.runs[0]);
            let ci = |f: fn(&RunMetrics) -> Option<MetricWithCi>| {
                let m = single.and_then(f);
                [cell(m.map(|m| m.ci_low)), cell(m.map(|m| m.ci_high))]
            };
            let mut cells = vec![
                i.to_string(),
                row.condition.clone(),
                row.n.to_string(),
                row.n_runs.to_string(),
            ];
            for s in [&row.accuracy, &row.sensitivity, &row.specificity, &row.precision, &row.f1, &row.auc] {
                cells.push(cell(s.mean));
                cells.push(cell(s.sd));
            }
            cells.extend(ci(|r| r.auc_delong));
            cells.extend(ci(|r| r.auc_bootstrap));
            cells.extend(ci(|r| r.accuracy_bootstrap));
            cells.push(cell(row.ece.mean));
            cells.push(cell(row.ece.sd));
            cells.push(cell(row.iq.and_then(|q| q.psnr_db)));
            cells.push(cell(row.iq.map(|q| q.ssim)));
            cells.push(cell(row.iq.map(|q| q.mse)));
            cells.push(cell(row.delta_auc));
            cells.push(cell(row.delta_acc));
            cells.push(rep.provenance.config_hash.clone());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

pub fn render_json(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn parse_json(text: &str) -> Result<MetricsReport> {
    Ok(serde_json::from_str(text)?)
}

/// Numeric x position of a condition tag: `λ` for doses, the level for
/// severities. Other conditions are not plotted.
fn condition_x(tag: &str) -> Option<f64> {
    tag.strip_prefix("dose_")
        .or_else(|| tag.strip_prefix("severity_"))
        .and_then(|v| v.parse().ok())
}

/// A series of (x, y) points for one metric of one report.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn plot_series(reports: &[MetricsReport]) -> Vec<Series> {
    let mut series = Vec::new();
    for (i, rep) in reports.iter().enumerate() {
        for (metric, pick) in [
            ("accuracy", (|r: &ReportRow| r.accuracy.mean) as fn(&ReportRow) -> Option<f64>),
            ("auc", |r: &ReportRow| r.auc.mean),
        ] {
            let mut points: Vec<(f64, f64)> = rep
                .rows
                .iter()
                .filter_map(|r| Some((condition_x(&r.condition)?, pick(r)?)))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            if !points.is_empty() {
                series.push(Series {
                    name: format!("{metric} ({} #{i})", rep.provenance.command),
                    points,
                });
            }
        }
    }
    series
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of accuracy and AUC against dose or severity, one polyline
/// per series, with axes and a legend.
pub fn render_svg(reports: &[MetricsReport]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let series = plot_series(reports);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (0.0, 1.0) };
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);

    let mut svg = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<g stroke=\"black\"><line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/><line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\"/></g>",
        H - M,
        W - M,
        H - M,
        H - M
    );
    for t in 0..=4 {
        let y = t as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{y}</text>",
            M - 4.0,
            py(y) + 3.0
        );
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{x}</text>",
            px(x),
            H - M + 14.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - M - 150.0,
            xml_escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the requested rendering of `reports` into `out_dir` and returns
/// the paths written: `report.csv`, `report_<i>.json` or `report.svg`.
pub fn cmd_report(reports: &[MetricsReport], format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::invalid("report needs at least one input report"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files: Vec<(PathBuf, String)> = match format {
        ReportFormat::Csv => vec![(out_dir.join("report.csv"), render_csv(reports))],
        ReportFormat::Svg => vec![(out_dir.join("report.svg"), render_svg(reports))],
        ReportFormat::Json => reports
            .iter()
            .enumerate()
            .map(|(i, r)| Ok((out_dir.join(format!("report_{i}.json")), render_json(r)?)))
            .collect::<Result<_>>()?,
    };
    for (p, text) in &files {
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Writes `report.json` and `report.csv` for a single report.
pub fn write_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, text) in [
        ("report.json", render_json(report)?),
        ("report.csv", render_csv(std::slice::from_ref(report))),
    ] {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub task: String,
    pub width: usize,
    pub height: usize,
    pub repetitions: usize,
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub iqr_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub tool_version: String,
    pub entries: Vec<BenchEntry>,
    /// Median dose-corruption time at twice the pixel count over the base size.
    pub dose_scaling_ratio: f64,
}

fn time_task(task: &str, w: usize, h: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<BenchEntry> {
    // One untimed warm-up run.
    f()?;
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile_sorted(&ms, 0.25), quantile_sorted(&ms, 0.75));
    Ok(BenchEntry {
        task: task.into(),
        width: w,
        height: h,
        repetitions: reps,
        median_ms: quantile_sorted(&ms, 0.5),
        q1_ms: q1,
        q3_ms: q3,
        iqr_ms: q3 - q1,
    })
}

/// Per-image wall-clock timings of corruption and IQ metrics.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let reps = cfg.bench.repetitions;
    let n = cfg.bench.image_size;
    let n2 = (n as f64 * std::f64::consts::SQRT_2).round() as usize;
    let img = phantom(n, n, true, 0);
    let big = phantom(n2, n2, true, 0);
    let dose = *cfg.doses.iter().min_by(|a, b| a.lambda().total_cmp(&b.lambda())).expect("validated");
    let level = cfg.severities.iter().max().copied().unwrap_or(3);
    let sev = cfg.schedule.severity(level)?;
    let seed = SeedSpec::new(first_seed(cfg), 0);
    let noisy = simulate_low_dose(&img, dose, seed)?;

    let entries = vec![
        time_task(&format!("dose_{dose}"), n, n, reps, || simulate_low_dose(&img, dose, seed).map(drop))?,
        time_task(&format!("dose_{dose}"), n2, n2, reps, || simulate_low_dose(&big, dose, seed).map(drop))?,
        time_task(&format!("severity_{level}"), n, n, reps, || {
            Corruption::Severity(sev).apply(&img, seed).map(drop)
        })?,
        time_task("psnr_ssim", n, n, reps, || iq_result(&img, &noisy).map(drop))?,
    ];
    let ratio = entries[1].median_ms / entries[0].median_ms;
    Ok(BenchReport {
        tool_version: TOOL_VERSION.into(),
        entries,
        dose_scaling_ratio: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, score: f64, label: u8) -> Prediction {
        Prediction::new(id, score, label).unwrap()
    }

    #[test]
    fn default_config_matches_protocol() {
        let c = RunConfig::default();
        let lambdas: Vec<f64> = c.doses.iter().map(|d| d.lambda()).collect();
        assert_eq!(lambdas, [1.0, 5.0, 10.0, 20.0, 40.0]);
        assert_eq!(c.severities, [1, 2, 3, 4, 5]);
        assert_eq!(c.seeds, [7, 17, 27]);
        assert_eq!((c.threshold, c.bootstrap_n, c.ece_bins), (0.5, 2000, 15));
        c.validate().unwrap();
    }

    #[test]
    fn config_from_toml_and_validation() {
        let c = RunConfig::from_toml_str(
            "doses = [10, 40]\nseeds = [1]\nthreshold = 0.4\n[baseline.denoiser]\nkind = \"gaussian\"\nsigma = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.doses.len(), 2);
        assert_eq!(c.threshold, 0.4);
        assert_eq!(c.ece_bins, 15);
        c.validate().unwrap();

        assert!(RunConfig::from_toml_str("doses = []").unwrap().validate().is_err());
        assert!(RunConfig::from_toml_str("seeds = []").unwrap().validate().is_err());
        assert!(RunConfig::from_toml_str("threshold = 1.0").unwrap().validate().is_err());
        assert!(RunConfig::from_toml_str("doses = [0]").is_err());
        assert!(RunConfig::from_toml_str("severities = [9]").unwrap().validate().is_err());
        assert!(RunConfig::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn config_hash_ignores_paths_only() {
        let a = RunConfig::default();
        let b = RunConfig { out: Some("/tmp/x".into()), manifest: Some("m.csv".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { threshold: 0.4, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn report_format_parse() {
        assert_eq!("svg".parse::<ReportFormat>().unwrap(), ReportFormat::Svg);
        assert!("pdf".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn stat_skips_undefined_runs() {
        let s = Stat::from_runs([Some(0.5), None, Some(0.7)]).unwrap();
        assert_eq!(s.n_defined, 2);
        assert!((s.mean.unwrap() - 0.6).abs() < 1e-15);
        let none = Stat::from_runs([None, None]).unwrap();
        assert_eq!((none.mean, none.sd), (None, None));
    }

    #[test]
    fn run_metrics_on_hand_case() {
        let preds = vec![pred("a", 0.9, 1), pred("b", 0.2, 0), pred("c", 0.6, 0), pred("d", 0.4, 1)];
        let cfg = RunConfig { bootstrap_n: 200, ..Default::default() };
        let m = compute_run_metrics(&preds, &cfg, 7).unwrap();
        assert_eq!(m.confusion, ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 });
        assert_eq!(m.auc, Some(0.75));
        assert_eq!(m.auc_delong.unwrap().point, 0.75);
        assert!(m.auc_bootstrap.is_some() && m.accuracy_bootstrap.is_some());
        assert_eq!(m, compute_run_metrics(&preds, &cfg, 7).unwrap());
    }

    #[test]
    fn single_class_has_no_auc() {
        let preds = vec![pred("a", 0.9, 0), pred("b", 0.2, 0)];
        let m = compute_run_metrics(&preds, &RunConfig::default(), 7).unwrap();
        assert_eq!((m.auc, m.auc_delong, m.auc_bootstrap), (None, None, None));
        assert!(m.accuracy_bootstrap.is_some());
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let preds = vec![pred("a", 0.9, 1), pred("b", 0.2, 0)];
        let cfg = RunConfig { bootstrap_n: 0, ..Default::default() };
        let row = ReportRow::from_runs("eval", vec![compute_run_metrics(&preds, &cfg, 1).unwrap()], None).unwrap();
        let rep = MetricsReport {
            provenance: Provenance::new(&cfg, "eval", vec![1]),
            baseline_condition: None,
            rows: vec![row],
        };
        let csv = render_csv(std::slice::from_ref(&rep));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), CSV_COLUMNS.len());
        assert_eq!(lines[1].split(',').count(), CSV_COLUMNS.len());
        assert_eq!(parse_json(&render_json(&rep).unwrap()).unwrap(), rep);
    }

    #[test]
    fn condition_positions() {
        assert_eq!(condition_x("dose_2.5"), Some(2.5));
        assert_eq!(condition_x("severity_3"), Some(3.0));
        assert_eq!(condition_x("clean"), None);
    }

    #[test]
    fn unsafe_ids_rejected_as_file_names() {
        assert!(check_file_id("p0001_s03").is_ok());
        for bad in ["", "..", "a/b", "a\\b"] {
            assert!(check_file_id(bad).is_err());
        }
    }
}
