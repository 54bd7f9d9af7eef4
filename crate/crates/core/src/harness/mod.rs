//! Experiment drivers: configuration, execution and reporting.
//!
//! Each experiment writes `<out>/<experiment>/data_*.csv` and a `summary.json`
//! listing every assertion with its measured value, threshold and verdict.

pub mod config;
mod experiments;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{
    parse_config, validate_config, ConfigIssue, Experiment, ExperimentConfig, InitialConfig, Thresholds,
};

/// How a measured value is compared with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    /// Plain-language statement of what is checked.
    pub claim: String,
    pub measured: f64,
    pub threshold: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl Assertion {
    pub fn below(name: &str, claim: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            claim: claim.into(),
            measured,
            threshold,
            relation: Relation::Below,
            pass: measured < threshold,
        }
    }

    pub fn above(name: &str, claim: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            claim: claim.into(),
            measured,
            threshold,
            relation: Relation::Above,
            pass: measured > threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    /// Extra measured quantities without a verdict.
    pub observations: serde_json::Map<String, serde_json::Value>,
}

/// Why an experiment could not produce a verdict.
#[derive(Debug)]
pub enum HarnessError {
    Config(Vec<ConfigIssue>),
    Run(crate::Error),
    Io(PathBuf, io::Error),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(issues) => {
                write!(f, "invalid configuration:")?;
                for i in issues {
                    write!(f, "\n  {i}")?;
                }
                Ok(())
            }
            HarnessError::Run(e) => write!(f, "{e}"),
            HarnessError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<crate::Error> for HarnessError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::WraparoundRisk { .. } => {
                HarnessError::Config(vec![ConfigIssue {
                    field: "model.cells".into(),
                    message: e.to_string(),
                }])
            }
            e => HarnessError::Run(e),
        }
    }
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

/// Collects CSV tables and the summary of one run.
pub(crate) struct Report {
    dir: PathBuf,
    pub assertions: Vec<Assertion>,
    pub observations: serde_json::Map<String, serde_json::Value>,
}

impl Report {
    fn new(dir: PathBuf) -> Result<Self, HarnessError> {
        fs::create_dir_all(&dir).map_err(|e| HarnessError::Io(dir.clone(), e))?;
        Ok(Self {
            dir,
            assertions: Vec::new(),
            observations: serde_json::Map::new(),
        })
    }

    pub fn assert(&mut self, a: Assertion) {
        self.assertions.push(a);
    }

    pub fn observe(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.observations.insert(key.into(), v);
    }

    /// Write `data_<name>.csv` from a header and rows of numbers.
    pub fn table(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), HarnessError> {
        let path = self.dir.join(format!("data_{name}.csv"));
        let io_err = |e: csv::Error| HarnessError::Io(path.clone(), io::Error::other(e));
        let mut w = csv::Writer::from_path(&path).map_err(io_err)?;
        w.write_record(header).map_err(io_err)?;
        for r in rows {
            w.write_record(r.iter().map(|x| format!("{x:.17e}"))).map_err(io_err)?;
        }
        w.flush().map_err(|e| HarnessError::Io(path.clone(), e))
    }

    /// Write `data_<name>.csv` through a caller-provided CSV writer.
    pub fn with_file<F>(&self, name: &str, write: F) -> Result<(), HarnessError>
    where
        F: FnOnce(fs::File) -> csv::Result<()>,
    {
        let path = self.dir.join(format!("data_{name}.csv"));
        let file = fs::File::create(&path).map_err(|e| HarnessError::Io(path.clone(), e))?;
        write(file).map_err(|e| HarnessError::Io(path.clone(), io::Error::other(e)))
    }
}

/// Directory receiving the artifacts of `config`.
pub fn artifact_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join(config.experiment.name())
}

/// Run one experiment and write its artifacts. A failed assertion is reported
/// through [`Summary::passed`], not as an error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary, HarnessError> {
    let dir = artifact_dir(config);
    let mut report = Report::new(dir.clone())?;
    experiments::run(config, &mut report)?;
    let summary = Summary {
        experiment: config.experiment,
        seed: config.seed,
        passed: report.assertions.iter().all(|a| a.pass),
        assertions: report.assertions,
        observations: report.observations,
    };
    write_summary(&dir, &summary)?;
    Ok(summary)
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<(), HarnessError> {
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| HarnessError::Io(path, e))
}

/// Exit status for a finished run: 0 when every assertion passed, 1 otherwise.
pub fn exit_code(summary: &Summary) -> i32 {
    if summary.passed {
        0
    } else {
        1
    }
}
