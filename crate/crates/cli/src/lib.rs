//! Scenario runner for the cnslab numerical laboratory.
//!
//! A scenario is a TOML file naming one experiment kind plus grid,
//! coefficients, initial data and solver settings. Running it produces a
//! [`report::RunReport`] written as JSON (full summary) and CSV (time series
//! and per-iteration tables).

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

use config::Scenario;
use error::CliError;
use rayon::prelude::*;
use report::{Golden, RunReport};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub use runner::run_scenario;

/// Worker count for `batch`.
pub const WORKERS_ENV: &str = "CNSLAB_WORKERS";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the scenario's output directory.
    pub out: Option<PathBuf>,
    /// Directory of frozen goldens to compare against.
    pub goldens: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.report.all_checks_pass() && self.report.goldens.as_ref().map_or(true, |g| g.passed())
    }
}

/// Loads, runs, compares with goldens when present, and writes outputs.
pub fn run_config(path: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let sc = Scenario::load(path)?;
    run_loaded(&sc, opts)
}

pub fn run_loaded(sc: &Scenario, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut report = run_scenario(sc)?;
    if let Some(dir) = &opts.goldens {
        let gp = Golden::path(dir, &sc.name);
        if gp.exists() {
            report.goldens = Some(Golden::load(&gp)?.compare(&report.summary));
        }
    }
    let dir = opts.out.clone().unwrap_or_else(|| sc.output.dir.clone());
    let files = report.emit(&dir, &sc.output.formats)?;
    Ok(RunOutcome { report, files })
}

/// Scenario files (`*.toml`) in `dir`, sorted by path.
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "toml") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub config: String,
    pub scenario: Option<String>,
    pub exit_code: i32,
    pub checks_passed: Option<bool>,
    pub goldens_passed: Option<bool>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub entries: Vec<BatchEntry>,
}

impl BatchSummary {
    /// First non-zero exit code in config order, or 1 for failed checks.
    pub fn exit_code(&self, strict: bool) -> i32 {
        if let Some(e) = self.entries.iter().find(|e| e.exit_code != 0) {
            return e.exit_code;
        }
        let failed = self.entries.iter().any(|e| e.checks_passed == Some(false) || e.goldens_passed == Some(false));
        if strict && failed {
            1
        } else {
            0
        }
    }
}

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every scenario in `dir` on a pool of [`worker_count`] threads and
/// writes `batch_summary.json` to `summary_dir`.
pub fn run_batch(dir: &Path, opts: &RunOptions, summary_dir: &Path) -> Result<BatchSummary, CliError> {
    let files = scenario_files(dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start worker pool: {e}")))?;
    let entries: Vec<BatchEntry> = pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let config = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                match run_config(f, opts) {
                    Ok(out) => BatchEntry {
                        config,
                        scenario: Some(out.report.scenario.clone()),
                        exit_code: 0,
                        checks_passed: Some(out.report.all_checks_pass()),
                        goldens_passed: out.report.goldens.as_ref().map(|g| g.passed()),
                        error: None,
                    },
                    Err(e) => BatchEntry {
                        config,
                        scenario: None,
                        exit_code: e.exit_code(),
                        checks_passed: None,
                        goldens_passed: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    let summary = BatchSummary { entries };
    std::fs::create_dir_all(summary_dir).map_err(|e| CliError::io(summary_dir, e))?;
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    bytes.push(b'\n');
    report::write_atomic(&summary_dir.join("batch_summary.json"), &bytes)?;
    Ok(summary)
}

/// Reruns every scenario in `scenarios` and freezes its summary under `goldens`.
pub fn update_goldens(scenarios: &Path, goldens: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(goldens).map_err(|e| CliError::io(goldens, e))?;
    let files = scenario_files(scenarios)?;
    let results: Vec<Result<PathBuf, CliError>> = files
        .par_iter()
        .map(|f| {
            let sc = Scenario::load(f)?;
            let report = run_scenario(&sc)?;
            let path = Golden::path(goldens, &sc.name);
            let mut bytes = serde_json::to_vec_pretty(&Golden::from_report(&report)).expect("golden serializes");
            bytes.push(b'\n');
            report::write_atomic(&path, &bytes)?;
            Ok(path)
        })
        .collect();
    results.into_iter().collect()
}
