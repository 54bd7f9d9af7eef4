//! Experiment configuration: TOML decoding and aggregated validation.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bloch_cell::{CouplingSpec, GaussianTerm, ModelParams};
use crate::covariance::{InitialMeasureSpec, MovingAverage};
use crate::dispersion::{band_structure, max_group_speed};
use crate::grid::ThetaGrid;
use crate::propagator::decay::check_wraparound;
use crate::propagator::TestFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Bands,
    Conditions,
    CouplingScan,
    Converge,
    Decay,
    Gaussianity,
    Mixing,
    Invariance,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Bands => "bands",
            Experiment::Conditions => "conditions",
            Experiment::CouplingScan => "coupling-scan",
            Experiment::Converge => "converge",
            Experiment::Decay => "decay",
            Experiment::Gaussianity => "gaussianity",
            Experiment::Mixing => "mixing",
            Experiment::Invariance => "invariance",
        }
    }

    fn needs_times(self) -> bool {
        matches!(
            self,
            Experiment::Converge
                | Experiment::Decay
                | Experiment::Gaussianity
                | Experiment::Mixing
                | Experiment::Invariance
        )
    }

    /// Experiments comparing with infinite-crystal limits, which must not let
    /// signals wrap around the periodic crystal.
    fn needs_wraparound_guard(self) -> bool {
        matches!(
            self,
            Experiment::Converge | Experiment::Decay | Experiment::Gaussianity | Experiment::Mixing
        )
    }

    fn needs_test_function(self) -> bool {
        matches!(
            self,
            Experiment::Converge | Experiment::Decay | Experiment::Gaussianity | Experiment::Mixing
        )
    }

    fn needs_initial(self) -> bool {
        matches!(
            self,
            Experiment::Converge | Experiment::Gaussianity | Experiment::Mixing | Experiment::Invariance
        )
    }

    fn needs_samples(self) -> bool {
        matches!(self, Experiment::Gaussianity | Experiment::Mixing)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pass/fail thresholds. Defaults are the values frozen from pilot runs on the
/// reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Relative error of decoupled bands against closed forms.
    pub bands_rel: f64,
    /// `|D_l|` below this counts as a Hessian zero.
    pub e1_tol: f64,
    /// Minimum grid variance of `omega_l +- omega_l'`.
    pub e2_tol: f64,
    /// Bands entering the non-degeneracy checks. High plane-wave bands are
    /// nearly linear, so absolute tolerances on them are not meaningful.
    pub condition_bands: usize,
    /// `|Q_t - Q_inf| / Q_inf` at the last time.
    pub converge_rel: f64,
    /// Late/early ratio of the oscillation envelope of `Q_t - Q_inf`.
    pub envelope_ratio: f64,
    /// Allowed deviation of the fitted sup exponent from `-d/2`.
    pub decay_exponent_tol: f64,
    /// Time window `[from, to]` for the exponent fit.
    pub fit_window: [f64; 2],
    /// Cone radius is `cone_factor * gamma * t`.
    pub cone_factor: f64,
    pub cone_time: f64,
    /// Outside-cone sup relative to the global sup at `cone_time`.
    pub cone_ratio: f64,
    /// `|kurtosis|` must exceed this at the first time.
    pub kurtosis_initial_min: f64,
    /// `|kurtosis|` must stay below this at the last time.
    pub kurtosis_final_max: f64,
    /// Characteristic function within this many standard errors at the last time.
    pub char_sigmas: f64,
    /// Some characteristic-function point beyond this many standard errors at the first time.
    pub initial_char_sigmas: f64,
    /// `|E <W(t)Y, Z><Y, Z1>| / Q_inf(Z, Z)` at `mixing_time`.
    pub mixing_ratio: f64,
    pub mixing_time: f64,
    pub mixing_sigmas: f64,
    /// Relative tolerance for fixed points and trace constancy.
    pub invariance_tol: f64,
    /// Monte-Carlo variance within this many standard errors (converge).
    pub variance_sigmas: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            bands_rel: 1e-12,
            e1_tol: 1e-6,
            e2_tol: 1e-6,
            condition_bands: 6,
            converge_rel: 0.02,
            envelope_ratio: 0.1,
            decay_exponent_tol: 0.1,
            fit_window: [20.0, 200.0],
            cone_factor: 1.3,
            cone_time: 100.0,
            cone_ratio: 1e-6,
            kurtosis_initial_min: 0.5,
            kurtosis_final_max: 0.1,
            char_sigmas: 3.0,
            initial_char_sigmas: 5.0,
            mixing_ratio: 0.05,
            mixing_time: 100.0,
            mixing_sigmas: 3.0,
            invariance_tol: 1e-10,
            variance_sigmas: 3.0,
        }
    }
}

/// Initial law as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConfig {
    Gibbs { temperature: f64 },
    MovingAverage(MovingAverage),
}

impl From<InitialConfig> for InitialMeasureSpec {
    fn from(c: InitialConfig) -> Self {
        match c {
            InitialConfig::Gibbs { temperature } => InitialMeasureSpec::Gibbs { temperature },
            InitialConfig::MovingAverage(ma) => InitialMeasureSpec::MovingAverage(ma),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawModel {
    dim: Option<usize>,
    components: Option<usize>,
    m0: Option<f64>,
    nu0: Option<f64>,
    cutoff: Option<usize>,
    cells: Option<usize>,
    coupling: Vec<GaussianTerm>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawRun {
    times: Option<Vec<f64>>,
    grid_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawEnsemble {
    samples: Option<usize>,
    s_points: Option<usize>,
    s_step: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawScan {
    amplitudes: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    experiment: Option<Experiment>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    model: Option<RawModel>,
    run: RawRun,
    test_function: Option<TestFunction>,
    aux_test_function: Option<TestFunction>,
    initial: Option<InitialConfig>,
    ensemble: RawEnsemble,
    scan: RawScan,
    thresholds: Thresholds,
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelParams,
    /// Observation times (dimensionless), ascending.
    pub times: Vec<f64>,
    /// Points per axis of the theta grid for band sweeps.
    pub grid_points: usize,
    pub test_function: Option<TestFunction>,
    /// Second test function for mixing (defaults to the first).
    pub aux_test_function: Option<TestFunction>,
    pub initial: Option<InitialMeasureSpec>,
    pub samples: usize,
    pub s_points: usize,
    /// Spacing of the characteristic-function grid in units of `Q^{-1/2}`.
    pub s_step: f64,
    pub scan_amplitudes: Vec<Vec<f64>>,
    pub thresholds: Thresholds,
}

/// One validation failure, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl ConfigIssue {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Config key behind a [`ModelParams::problems`] message.
fn model_field(problem: &str) -> &'static str {
    let head = problem.split_whitespace().next().unwrap_or("");
    match head {
        "d" => "model.dim",
        "n" => "model.components",
        "m0" => "model.m0",
        "nu0" => "model.nu0",
        "N" => "model.cells",
        "coupling" => "model.coupling",
        _ => "model",
    }
}

/// Parse and validate with the experiment taken from the file.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, Vec<ConfigIssue>> {
    parse_config(text, None)
}

/// Parse and validate; `experiment` overrides the file's `experiment` key.
pub fn parse_config(text: &str, experiment: Option<Experiment>) -> Result<ExperimentConfig, Vec<ConfigIssue>> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let field = e
            .span()
            .and_then(|s| text.get(s))
            .map(|s| s.split(['=', '\n']).next().unwrap_or("").trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "config".into());
        vec![ConfigIssue::new(&field, msg)]
    })?;
    let mut issues = Vec::new();

    let experiment = experiment.or(raw.experiment);
    if experiment.is_none() {
        issues.push(ConfigIssue::new("experiment", "missing"));
    }

    let model = match &raw.model {
        None => {
            issues.push(ConfigIssue::new("model", "missing section"));
            None
        }
        Some(m) => {
            let mut need = |name: &str, present: bool| {
                if !present {
                    issues.push(ConfigIssue::new(&format!("model.{name}"), "missing"));
                }
            };
            need("dim", m.dim.is_some());
            need("components", m.components.is_some());
            need("m0", m.m0.is_some());
            need("nu0", m.nu0.is_some());
            need("cutoff", m.cutoff.is_some());
            need("cells", m.cells.is_some());
            match (m.dim, m.components, m.m0, m.nu0, m.cutoff, m.cells) {
                (Some(dim), Some(components), Some(m0), Some(nu0), Some(cutoff), Some(cells)) => {
                    let model = ModelParams {
                        dim,
                        components,
                        m0,
                        nu0,
                        cutoff,
                        coupling: CouplingSpec::sum_of_gaussians(m.coupling.clone()),
                        cells,
                    };
                    let problems = model.problems();
                    for p in &problems {
                        issues.push(ConfigIssue::new(model_field(p), p.clone()));
                    }
                    problems.is_empty().then_some(model)
                }
                _ => None,
            }
        }
    };

    let times = raw.run.times.clone().unwrap_or_default();
    if let Some(exp) = experiment {
        if exp.needs_times() {
            if times.is_empty() {
                issues.push(ConfigIssue::new("run.times", "missing or empty"));
            } else if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                issues.push(ConfigIssue::new("run.times", "times must be finite and non-negative"));
            } else if times.windows(2).any(|w| w[1] <= w[0]) {
                issues.push(ConfigIssue::new("run.times", "times must be strictly increasing"));
            }
        }
    }

    let dim = model.as_ref().map_or(1, |m| m.dim);
    let grid_points = raw.run.grid_points.unwrap_or(if dim == 1 { 256 } else { 32 });
    let min_points = if dim == 1 { 64 } else { 8 };
    if grid_points < min_points {
        issues.push(ConfigIssue::new(
            "run.grid_points",
            format!("need at least {min_points} points per axis"),
        ));
    }

    let t = &raw.thresholds;
    if let Some(exp) = experiment {
        if exp.needs_test_function() && raw.test_function.is_none() {
            issues.push(ConfigIssue::new("test_function", "missing section"));
        }
        if let Some(m) = &model {
            for (name, tf) in [
                ("test_function", &raw.test_function),
                ("aux_test_function", &raw.aux_test_function),
            ] {
                if let Some(tf) = tf {
                    for p in tf.problems(m) {
                        issues.push(ConfigIssue::new(name, p));
                    }
                }
            }
        }
        if exp.needs_initial() {
            match (&raw.initial, &model) {
                (None, _) => issues.push(ConfigIssue::new("initial", "missing section")),
                (Some(InitialConfig::Gibbs { temperature }), _) if !(*temperature > 0.0) => {
                    issues.push(ConfigIssue::new("initial.temperature", "must be positive"))
                }
                (Some(InitialConfig::MovingAverage(ma)), Some(m)) => {
                    for p in ma.problems(m) {
                        issues.push(ConfigIssue::new("initial", p));
                    }
                }
                _ => {}
            }
        }
        let samples = raw.ensemble.samples.unwrap_or(0);
        if exp.needs_samples() && samples < 100 {
            issues.push(ConfigIssue::new(
                "ensemble.samples",
                "statistical assertions need at least 100 samples",
            ));
        }
        if exp == Experiment::Gaussianity {
            if times.len() < 2 {
                issues.push(ConfigIssue::new("run.times", "gaussianity needs an initial and a final time"));
            }
            if !matches!(raw.initial, Some(InitialConfig::MovingAverage(_))) {
                issues.push(ConfigIssue::new("initial.kind", "gaussianity needs a moving-average law"));
            }
        }
        if exp == Experiment::Converge && !times.is_empty() {
            let t_max = times[times.len() - 1];
            if !(times.iter().any(|&s| s < t_max / 4.0) && times.iter().any(|&s| s >= t_max / 4.0)) {
                issues.push(ConfigIssue::new(
                    "run.times",
                    "converge needs times on both sides of t_max / 4",
                ));
            }
        }
        if exp == Experiment::Decay && !times.is_empty() {
            if !times.contains(&t.cone_time) {
                issues.push(ConfigIssue::new("thresholds.cone_time", "must be one of run.times"));
            }
            let in_window = times
                .iter()
                .filter(|&&s| s >= t.fit_window[0] && s <= t.fit_window[1] && s > 0.0)
                .count();
            if in_window < 2 {
                issues.push(ConfigIssue::new(
                    "thresholds.fit_window",
                    "needs at least two positive run.times inside",
                ));
            }
        }
        if exp == Experiment::Mixing && !times.is_empty() && !times.contains(&t.mixing_time) {
            issues.push(ConfigIssue::new("thresholds.mixing_time", "must be one of run.times"));
        }
        if exp == Experiment::CouplingScan {
            let terms = raw.model.as_ref().map_or(0, |m| m.coupling.len());
            match &raw.scan.amplitudes {
                None => issues.push(ConfigIssue::new("scan.amplitudes", "missing")),
                Some(rows) => {
                    if terms == 0 {
                        issues.push(ConfigIssue::new("model.coupling", "the scan needs at least one base term"));
                    }
                    if rows.iter().any(|r| r.len() != terms) {
                        issues.push(ConfigIssue::new(
                            "scan.amplitudes",
                            format!("every row needs {terms} entries, one per coupling term"),
                        ));
                    }
                }
            }
        }
        // the guard needs a spectral sweep, so run it only on an otherwise valid model
        if exp.needs_wraparound_guard() && !times.is_empty() {
            if let Some(m) = &model {
                let coarse = ThetaGrid::uniform(m.dim, m.cells.min(if m.dim == 1 { 256 } else { 32 }));
                match band_structure(m, &coarse) {
                    Ok(bands) => {
                        let speed = max_group_speed(&bands).max_speed;
                        if let Err(e) = check_wraparound(m.cells, speed, times[times.len() - 1]) {
                            issues.push(ConfigIssue::new("model.cells", e.to_string()));
                        }
                    }
                    Err(e) => issues.push(ConfigIssue::new("model", e.to_string())),
                }
            }
        }
    }
    if t.condition_bands == 0 {
        issues.push(ConfigIssue::new("thresholds.condition_bands", "must be at least 1"));
    }
    let s_points = raw.ensemble.s_points.unwrap_or(11);
    let s_step = raw.ensemble.s_step.unwrap_or(0.25);
    if s_points < 2 {
        issues.push(ConfigIssue::new("ensemble.s_points", "need at least 2 points"));
    }
    if !(s_step > 0.0) {
        issues.push(ConfigIssue::new("ensemble.s_step", "must be positive"));
    }

    if !issues.is_empty() {
        return Err(issues);
    }
    Ok(ExperimentConfig {
        experiment: experiment.expect("checked above"),
        seed: raw.seed.unwrap_or(1),
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        model: model.expect("checked above"),
        times,
        grid_points,
        test_function: raw.test_function,
        aux_test_function: raw.aux_test_function,
        initial: raw.initial.map(Into::into),
        samples: raw.ensemble.samples.unwrap_or(0),
        s_points,
        s_step,
        scan_amplitudes: raw.scan.amplitudes.unwrap_or_default(),
        thresholds: raw.thresholds,
    })
}
