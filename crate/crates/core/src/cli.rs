//! `ncm-stream` command line: `gen`, `run`, `sweep`, `export-check`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{generate_synthetic_tasks, read_embedding_stream, DatasetManifest, StoreError, SyntheticSpec};
use crate::harness::{run_experiment, HarnessError, Method, RunConfig, RunOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ncm-stream", version, about = "Online class-incremental learning benchmark over embedding files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset.
    Gen {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        per_class_train: usize,
        #[arg(long)]
        per_class_test: usize,
        #[arg(long)]
        seed: u64,
        /// Per-coordinate standard deviation of each cluster.
        #[arg(long, default_value_t = 0.05)]
        spread: f64,
        /// Norm of each class center.
        #[arg(long, default_value_t = 1.0)]
        mean_scale: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run every point of a JSON sweep and write a summary table.
    Sweep {
        sweep: PathBuf,
        /// Overrides the sweep file's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Validate an embedding file, or a manifest and the file it names.
    ExportCheck { path: PathBuf },
}

/// Failure of a command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Json(_) => CliError::Usage(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::InvalidParameter(_) => CliError::Usage(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return e.exit_code();
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Gen { classes, dim, per_class_train, per_class_test, seed, spread, mean_scale, out: dir } => {
            let spec = SyntheticSpec {
                num_classes: classes,
                dim,
                per_class_train,
                per_class_test,
                cluster_spread: spread,
                mean_scale,
                seed,
            };
            let (_, manifest_path) = generate_synthetic_tasks(&spec, &dir)?;
            writeln!(out, "{}", manifest_path.display())?;
            Ok(())
        }
        Command::Run { config, out: dir } => {
            let config = load_run_config(&config)?;
            let outcome = run_experiment(&config)?;
            outcome.write(&dir)?;
            writeln!(
                out,
                "{}: avg {:.4} last {:.4} -> {}",
                config.method,
                outcome.metrics.avg,
                outcome.metrics.last,
                dir.display()
            )?;
            Ok(())
        }
        Command::Sweep { sweep, out: dir, parallel } => {
            let summary = run_sweep(&sweep, dir.as_deref(), parallel)?;
            writeln!(out, "{}", summary.display())?;
            Ok(())
        }
        Command::ExportCheck { path } => {
            let report = export_check(&path)?;
            writeln!(out, "{report}")?;
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads and validates a run config; its manifest path is resolved against
/// the config file's directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = read_text(path)?;
    let mut config: RunConfig = parse_json(path, &text)?;
    config.validate()?;
    if let Some(m) = &config.manifest {
        config.manifest = Some(resolve(&config_dir(path), m));
    }
    Ok(config)
}

/// The varied parameter of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepAxis {
    ExemplarBudget(Vec<usize>),
    StepSize(Vec<usize>),
    Method(Vec<Method>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub axis: SweepAxis,
    pub output_dir: PathBuf,
}

impl SweepSpec {
    /// Expands the axis into run configs; every point must validate.
    pub fn points(&self) -> Result<Vec<RunConfig>, CliError> {
        let points: Vec<RunConfig> = match &self.axis {
            SweepAxis::ExemplarBudget(qs) => {
                qs.iter().map(|q| RunConfig { exemplar_budget: *q, ..self.base.clone() }).collect()
            }
            SweepAxis::StepSize(ms) => ms.iter().map(|m| RunConfig { step_size: *m, ..self.base.clone() }).collect(),
            SweepAxis::Method(ms) => ms.iter().map(|m| RunConfig { method: *m, ..self.base.clone() }).collect(),
        };
        if points.is_empty() {
            return Err(CliError::Usage("sweep axis is empty".into()));
        }
        for (i, p) in points.iter().enumerate() {
            p.validate().map_err(|e| CliError::Usage(format!("sweep point {i}: {e}")))?;
        }
        Ok(points)
    }
}

fn point_dir_name(i: usize, c: &RunConfig) -> String {
    format!("{i:02}_{}_M{}_Q{}", c.method, c.step_size, c.exemplar_budget)
}

/// Runs a sweep file. Returns the path of `summary.csv`.
pub fn run_sweep(path: &Path, out_override: Option<&Path>, parallel: bool) -> Result<PathBuf, CliError> {
    let text = read_text(path)?;
    let spec: SweepSpec = parse_json(path, &text)?;
    let base_dir = config_dir(path);
    let out_dir = match out_override {
        Some(o) => o.to_path_buf(),
        None => resolve(&base_dir, &spec.output_dir),
    };
    let mut points = spec.points()?;
    for p in &mut points {
        if let Some(m) = &p.manifest {
            p.manifest = Some(resolve(&base_dir, m));
        }
    }

    let run_point = |(i, c): (usize, &RunConfig)| -> Result<RunOutcome, CliError> {
        let outcome = run_experiment(c)?;
        outcome.write(out_dir.join(point_dir_name(i, c)))?;
        Ok(outcome)
    };
    let outcomes: Vec<RunOutcome> = if parallel {
        points.par_iter().enumerate().map(run_point).collect::<Result<_, _>>()?
    } else {
        points.iter().enumerate().map(run_point).collect::<Result<_, _>>()?
    };

    let mut csv = String::from("method,M,Q,avg,last\n");
    for (c, o) in points.iter().zip(&outcomes) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.method, c.step_size, c.exemplar_budget, o.metrics.avg, o.metrics.last
        ));
    }
    let summary = out_dir.join("summary.csv");
    fs::write(&summary, csv)?;
    Ok(summary)
}

/// Streams an embedding file (or the file behind a manifest) through the
/// reader and reports what it found.
pub fn export_check(path: &Path) -> Result<String, CliError> {
    let is_manifest = path.extension().is_some_and(|e| e == "json");
    if is_manifest {
        let manifest = DatasetManifest::from_path(path)?;
        let mut n = 0u64;
        let mut labels = BTreeSet::new();
        manifest
            .scan(&config_dir(path), |r, _| {
                n += 1;
                labels.insert(r.label);
            })
            ?;
        Ok(format!(
            "ok: manifest {} with {n} records, dim {}, {} classes ({} present)",
            path.display(),
            manifest.dim,
            manifest.num_classes,
            labels.len()
        ))
    } else {
        let reader = read_embedding_stream(path)?;
        let dim = reader.dim();
        let mut n = 0u64;
        let mut labels = BTreeSet::new();
        for r in reader {
            let r = r?;
            n += 1;
            labels.insert(r.label);
        }
        Ok(format!("ok: {} with {n} records, dim {dim}, {} distinct labels", path.display(), labels.len()))
    }
}
