use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ldct_bench::dataset::{load_manifest, validate_splits, Dataset};
use ldct_bench::harness::{
    cmd_baseline, cmd_bench, cmd_corrupt, cmd_eval, cmd_report, cmd_stress, read_report,
    write_json, write_report, CorruptMode, ReportFormat, RunConfig,
};
use ldct_bench::Error;

/// Low-dose and portable-CT robustness benchmark harness.
#[derive(Debug, Parser)]
#[command(name = "ldct-harness", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Decision threshold for threshold metrics.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Dose,
    Severity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write corrupted copies of every manifest image.
    Corrupt {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dose")]
        mode: Mode,
    },
    /// Evaluate an external `id,score` file on the test split.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Per-severity metrics and deltas against a baseline score file.
    Stress {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Scores on clean (uncorrupted) inputs.
        #[arg(long)]
        baseline: PathBuf,
        /// `LEVEL=PATH`, once per severity.
        #[arg(long = "severity", value_parser = parse_severity_file)]
        severities: Vec<(u8, PathBuf)>,
    },
    /// Train and score the classical denoise-then-classify baseline.
    Baseline {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Render report JSON files as CSV, JSON or SVG.
    Report {
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Time corruption and image-quality metrics.
    Bench,
    /// Check a manifest for patients shared across splits.
    SplitCheck {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn parse_severity_file(s: &str) -> Result<(u8, PathBuf), String> {
    let (level, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected LEVEL=PATH, got {s:?}"))?;
    let level = level
        .trim()
        .parse()
        .map_err(|_| format!("severity level {level:?} is not an integer"))?;
    Ok((level, PathBuf::from(path)))
}

fn config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<Dataset, Error> {
    let path = flag
        .as_ref()
        .or(cfg.manifest.as_ref())
        .ok_or_else(|| Error::Invalid("no manifest given (--manifest or config `manifest`)".into()))?;
    load_manifest(path)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let cfg = config(cli)?;
    let out = out_dir(&cfg);
    match &cli.command {
        Command::Corrupt { manifest, mode } => {
            let ds = dataset(&cfg, manifest)?;
            let mode = match mode {
                Mode::Dose => CorruptMode::Dose,
                Mode::Severity => CorruptMode::Severity,
            };
            let prov = cmd_corrupt(&cfg, &ds, &out, mode)?;
            println!("wrote {} images to {}", prov.n_files, out.display());
        }
        Command::Eval { manifest, scores } => {
            let ds = dataset(&cfg, manifest)?;
            let report = cmd_eval(&cfg, &ds, scores)?;
            write_report(&report, &out)?;
            print_summary(&out);
        }
        Command::Stress {
            manifest,
            baseline,
            severities,
        } => {
            let ds = dataset(&cfg, manifest)?;
            let mut files = BTreeMap::new();
            for (level, path) in severities {
                if files.insert(*level, path.clone()).is_some() {
                    return Err(Error::Invalid(format!("severity {level} given twice")));
                }
            }
            let report = cmd_stress(&cfg, &ds, baseline, &files)?;
            write_report(&report, &out)?;
            print_summary(&out);
        }
        Command::Baseline { manifest } => {
            let ds = dataset(&cfg, manifest)?;
            let report = cmd_baseline(&cfg, &ds, &out)?;
            write_report(&report, &out)?;
            print_summary(&out);
        }
        Command::Report { format, reports } => {
            let loaded = reports.iter().map(read_report).collect::<Result<Vec<_>, _>>()?;
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
                Format::Svg => ReportFormat::Svg,
            };
            for p in cmd_report(&loaded, format, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Bench => {
            let report = cmd_bench(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_json(&report, out.join("bench.json"))?;
            for e in &report.entries {
                println!(
                    "{:<14} {:>4}x{:<4} median {:>9.3} ms  IQR {:>8.3} ms  (n={})",
                    e.task, e.width, e.height, e.median_ms, e.iqr_ms, e.repetitions
                );
            }
            println!("dose time ratio at 2x pixels: {:.2}", report.dose_scaling_ratio);
        }
        Command::SplitCheck { manifest } => {
            let ds = dataset(&cfg, manifest)?;
            let report = validate_splits(&ds);
            print!("{}", report.to_text());
            return Ok(report.pass);
        }
    }
    Ok(true)
}

fn print_summary(out: &Path) {
    println!("wrote {}", out.join("report.json").display());
    println!("wrote {}", out.join("report.csv").display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
