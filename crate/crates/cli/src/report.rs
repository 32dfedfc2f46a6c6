//! Run reports and their CSV/JSON encodings.

use crate::config::{Format, Kind};
use crate::error::CliError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SCHEMA: &str = "cnslab-report/1";

/// Column-labelled rows; `None` marks a missing or non-finite entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Series {
    pub fn new(columns: &[&str]) -> Self {
        Series { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row.iter().map(|v| v.is_finite().then_some(*v)).collect());
    }

    pub fn push_opt(&mut self, row: Vec<Option<f64>>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row.into_iter().map(|v| v.filter(|x| x.is_finite())).collect());
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.map(format_value).unwrap_or_default()))?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }
}

/// Shortest round-trip text, scientific outside `[1e-4, 1e15)`.
pub fn format_value(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Le,
    Lt,
    Ge,
    Gt,
}

impl Relation {
    fn holds(&self, value: f64, bound: f64) -> bool {
        match self {
            Relation::Le => value <= bound,
            Relation::Lt => value < bound,
            Relation::Ge => value >= bound,
            Relation::Gt => value > bound,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when the measured value was not finite.
    pub value: Option<f64>,
    pub relation: Relation,
    pub bound: f64,
    pub passed: bool,
}

/// Frozen values for one scenario, compared with relative tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Golden {
    pub scenario: String,
    pub rel_tol: f64,
    /// Floor for roundoff-level values (invariant defects, method gaps).
    pub abs_tol: f64,
    pub values: BTreeMap<String, f64>,
}

pub const GOLDEN_REL_TOL: f64 = 1e-6;
pub const GOLDEN_ABS_TOL: f64 = 1e-12;

impl Golden {
    pub fn from_report(report: &RunReport) -> Self {
        Golden {
            scenario: report.scenario.clone(),
            rel_tol: GOLDEN_REL_TOL,
            abs_tol: GOLDEN_ABS_TOL,
            values: report.summary.clone(),
        }
    }

    pub fn path(dir: &Path, scenario: &str) -> PathBuf {
        dir.join(format!("{scenario}.json"))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::io(path, format!("bad golden file: {e}")))
    }

    pub fn compare(&self, summary: &BTreeMap<String, f64>) -> GoldenComparison {
        let entries = self
            .values
            .iter()
            .map(|(name, &golden)| {
                let value = summary.get(name).copied();
                let passed = value.is_some_and(|v| (v - golden).abs() <= (self.rel_tol * golden.abs()).max(self.abs_tol));
                GoldenEntry { name: name.clone(), golden, value, passed }
            })
            .collect();
        GoldenComparison { rel_tol: self.rel_tol, abs_tol: self.abs_tol, entries }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub name: String,
    pub golden: f64,
    pub value: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenComparison {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub entries: Vec<GoldenEntry>,
}

impl GoldenComparison {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub scenario: String,
    pub kind: Kind,
    pub seed: u64,
    /// Sample times of `series` (simulated time, not wall clock).
    pub timestamps: Vec<f64>,
    pub series: Series,
    /// Secondary tables (Picard iterations, scan points); one CSV each.
    pub tables: BTreeMap<String, Series>,
    /// Finite scalar results: rates, constants, residuals.
    pub summary: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub goldens: Option<GoldenComparison>,
}

impl RunReport {
    pub fn new(scenario: &str, kind: Kind, seed: u64) -> Self {
        RunReport {
            schema: SCHEMA.to_string(),
            scenario: scenario.to_string(),
            kind,
            seed,
            timestamps: Vec::new(),
            series: Series::new(&["time"]),
            tables: BTreeMap::new(),
            summary: BTreeMap::new(),
            checks: Vec::new(),
            goldens: None,
        }
    }

    /// Non-finite values are dropped so the summary stays JSON-exact.
    pub fn metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.summary.insert(name.to_string(), value);
        }
    }

    pub fn check(&mut self, name: &str, value: f64, relation: Relation, bound: f64) {
        let finite = value.is_finite();
        self.checks.push(Check {
            name: name.to_string(),
            value: finite.then_some(value),
            relation,
            bound,
            passed: finite && relation.holds(value, bound),
        });
    }

    pub fn set_series(&mut self, series: Series) {
        self.timestamps = series.rows.iter().map(|r| r[0].unwrap_or(f64::NAN)).filter(|t| t.is_finite()).collect();
        self.series = series;
    }

    pub fn all_checks_pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema != SCHEMA {
            return Err(format!("schema {} does not match emitter {SCHEMA}", self.schema));
        }
        if self.checks.is_empty() {
            return Err("report carries no checks".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Writes `<name>.json`, `<name>.csv` and `<name>_<table>.csv` atomically.
    pub fn emit(&self, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, CliError> {
        self.validate().map_err(CliError::Validation)?;
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut written = Vec::new();
        let mut formats = formats.to_vec();
        formats.sort();
        formats.dedup();
        for f in formats {
            match f {
                Format::Json => {
                    let path = dir.join(format!("{}.json", self.scenario));
                    write_atomic(&path, &self.to_json())?;
                    written.push(path);
                }
                Format::Csv => {
                    let path = dir.join(format!("{}.csv", self.scenario));
                    write_atomic(&path, &self.series.to_csv().map_err(|e| CliError::io(&path, e))?)?;
                    written.push(path);
                    for (name, table) in &self.tables {
                        let path = dir.join(format!("{}_{name}.csv", self.scenario));
                        write_atomic(&path, &table.to_csv().map_err(|e| CliError::io(&path, e))?)?;
                        written.push(path);
                    }
                }
            }
        }
        Ok(written)
    }
}

/// Temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}
