//! Scenario files.
//!
//! A scenario is a plain-text list of `key = value` lines. Blank lines and
//! lines starting with `#` are ignored, list values are separated by spaces
//! or commas, and a scalar given for a per-dimension list is repeated. Model
//! parameters are written `param.<name>` and stopping parameters
//! `stop.<name>`; both are checked against the tables of the chosen
//! built-in. Any other key outside [`KEYS`] is rejected, as is a key given
//! twice.
//!
//! Only `mode` and `model` are required. [`Scenario::to_manifest`] renders
//! the fully resolved configuration in the same format, so a manifest can be
//! run again as a scenario.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use major_mfg::builtin::{self, Params};
use major_mfg::fixedpoint::{FixedPointOptions, NonConvergencePolicy};
use major_mfg::limits::StudyProblem;
use major_mfg::{GridSpec, ModelSpec, SolverConfig, StoppingSpec};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    System,
    Myopic,
    Penalized,
    Obstacle,
    LambdaSweep,
    EpsilonSweep,
    Refine,
    Oracle,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::System,
        Mode::Myopic,
        Mode::Penalized,
        Mode::Obstacle,
        Mode::LambdaSweep,
        Mode::EpsilonSweep,
        Mode::Refine,
        Mode::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::System => "SYSTEM",
            Mode::Myopic => "MYOPIC",
            Mode::Penalized => "PENALIZED",
            Mode::Obstacle => "OBSTACLE",
            Mode::LambdaSweep => "LAMBDA_SWEEP",
            Mode::EpsilonSweep => "EPSILON_SWEEP",
            Mode::Refine => "REFINE",
            Mode::Oracle => "ORACLE",
        }
    }

    pub fn is_sweep(self) -> bool {
        matches!(self, Mode::LambdaSweep | Mode::EpsilonSweep | Mode::Refine)
    }

    fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

/// Every plain key with its default; `None` marks a required key.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("mode", None),
    ("model", None),
    ("k", Some("2")),
    ("d", Some("1")),
    ("x_min", Some("0")),
    ("x_max", Some("2")),
    ("n_x", Some("21")),
    ("y_min", Some("-1")),
    ("y_max", Some("1")),
    ("n_y", Some("41")),
    ("T", Some("1")),
    ("dt", Some("0.001")),
    ("tol_fp", Some("1e-10")),
    ("theta", Some("0.5")),
    ("max_iter", Some("200")),
    ("fp_policy", Some("abort")),
    ("tie_tol", Some("1e-12")),
    ("inner_sweeps", Some("0")),
    ("snapshot_every", Some("100")),
    ("blowup_bound", Some("1e8")),
    ("stopping", Some("none")),
    ("tol_c", Some("0")),
    ("compat_threshold", Some("1e-3")),
    ("t1", Some("0.1")),
    ("lambdas", Some("1 10 100 1000")),
    ("epsilons", Some("0.1 0.01 0.001")),
    ("refine_problem", Some("SYSTEM")),
    ("levels", Some("3")),
    ("memory_limit_mb", Some("4096")),
    ("particles", Some("100000")),
    ("particle_counts", Some("1000 10000 100000")),
    ("replicas", Some("12")),
    ("oracle_times", Some("0.2 0.4 0.6 0.8 1")),
    ("x0", Some("1.5 0.3")),
    ("y0", Some("0.2")),
    ("u_frozen", Some("0.4 -0.1")),
    ("alpha_frozen", Some("0.3")),
    ("fd_samples", Some("200")),
    ("seed", Some("0")),
    ("output", Some("")),
];

/// A parsed and type-checked scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub mode: Mode,
    pub model: String,
    pub k: usize,
    pub d: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub n_x: Vec<usize>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub n_y: Vec<usize>,
    pub horizon: f64,
    pub dt: f64,
    pub tol_fp: f64,
    pub theta: f64,
    pub max_iter: usize,
    pub fp_policy: NonConvergencePolicy,
    pub tie_tol: f64,
    pub inner_sweeps: usize,
    pub snapshot_every: usize,
    pub blowup_bound: f64,
    /// Resolved model parameters (defaults merged with `param.*`).
    pub model_params: Params,
    pub stopping: Option<String>,
    /// Resolved stopping parameters when a profile is set.
    pub stop_params: Params,
    pub tol_c: f64,
    pub compat_threshold: f64,
    pub t1: f64,
    pub lambdas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub refine_problem: Mode,
    pub levels: usize,
    pub memory_limit_mb: usize,
    pub particles: usize,
    pub particle_counts: Vec<usize>,
    pub replicas: usize,
    pub oracle_times: Vec<f64>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub u_frozen: Vec<f64>,
    pub alpha_frozen: Vec<f64>,
    pub fd_samples: usize,
    pub seed: u64,
    /// Output directory name; empty means "derive from the file name".
    pub output: String,
}

struct Entry {
    line: usize,
    value: String,
}

struct Raw {
    plain: BTreeMap<String, Entry>,
    params: BTreeMap<String, Entry>,
    stop: BTreeMap<String, Entry>,
}

impl Raw {
    fn read(text: &str) -> Result<Raw, CliError> {
        let mut raw = Raw {
            plain: BTreeMap::new(),
            params: BTreeMap::new(),
            stop: BTreeMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::parse(Some(line_no), line, "expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            let (table, name) = if let Some(name) = key.strip_prefix("param.") {
                (&mut raw.params, name)
            } else if let Some(name) = key.strip_prefix("stop.") {
                (&mut raw.stop, name)
            } else if KEYS.iter().any(|(k, _)| *k == key) {
                (&mut raw.plain, key)
            } else {
                return Err(CliError::parse(Some(line_no), key, "unknown key"));
            };
            if name.is_empty() {
                return Err(CliError::parse(Some(line_no), key, "empty parameter name"));
            }
            let entry = Entry {
                line: line_no,
                value: value.to_string(),
            };
            if let Some(prev) = table.insert(name.to_string(), entry) {
                return Err(CliError::parse(
                    Some(line_no),
                    key,
                    format!("duplicate key (first given on line {})", prev.line),
                ));
            }
        }
        Ok(raw)
    }

    fn text(&self, key: &str) -> Result<(Option<usize>, &str), CliError> {
        if let Some(e) = self.plain.get(key) {
            return Ok((Some(e.line), &e.value));
        }
        match KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d) {
            Some(default) => Ok((None, default)),
            None => Err(CliError::parse(None, key, "required key is missing")),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let (line, text) = self.text(key)?;
        text.parse().map_err(|e| CliError::parse(line, key, format!("cannot parse `{text}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let (line, text) = self.text(key)?;
        text.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::parse(line, key, format!("cannot parse `{s}`: {e}"))))
            .collect()
    }

    /// A per-dimension list; a single value is repeated `n` times.
    fn dims<T: FromStr + Clone>(&self, key: &str, n: usize) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let v: Vec<T> = self.list(key)?;
        match v.len() {
            1 => Ok(vec![v[0].clone(); n]),
            len if len == n => Ok(v),
            len => Err(CliError::parse(self.line(key), key, format!("{len} values given, expected 1 or {n}"))),
        }
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.plain.get(key).map(|e| e.line)
    }

    fn overrides(table: &BTreeMap<String, Entry>, prefix: &str) -> Result<Params, CliError> {
        table
            .iter()
            .map(|(name, e)| {
                e.value
                    .parse::<f64>()
                    .map(|v| (name.clone(), v))
                    .map_err(|err| CliError::parse(Some(e.line), format!("{prefix}.{name}"), format!("cannot parse `{}`: {err}", e.value)))
            })
            .collect()
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, CliError> {
        let raw = Raw::read(text)?;
        let (mode_line, mode_text) = raw.text("mode")?;
        let mode = Mode::parse(mode_text).ok_or_else(|| CliError::parse(mode_line, "mode", format!("unknown mode `{mode_text}`")))?;
        let (model_line, model) = raw.text("model")?;
        let model = model.to_string();
        let k: usize = raw.get("k")?;
        let d: usize = raw.get("d")?;
        let model_overrides = Raw::overrides(&raw.params, "param")?;
        let model_params = builtin::resolve_model_parameters(&model, &model_overrides).map_err(|e| {
            let line = raw
                .params
                .iter()
                .find(|(name, _)| e.to_string().contains(&format!("`{name}`")))
                .map_or(model_line, |(_, entry)| Some(entry.line));
            CliError::parse(line, "model", e.to_string())
        })?;
        let (stop_line, stop_text) = raw.text("stopping")?;
        let stopping = (stop_text != "none").then(|| stop_text.to_string());
        let stop_overrides = Raw::overrides(&raw.stop, "stop")?;
        let stop_params = match &stopping {
            Some(name) => builtin::resolve_stopping_parameters(name, &stop_overrides).map_err(|e| CliError::parse(stop_line, "stopping", e.to_string()))?,
            None if !stop_overrides.is_empty() => {
                return Err(CliError::parse(None, "stop.*", "stopping parameters given without a stopping profile"));
            }
            None => Params::new(),
        };
        let fp_policy = match raw.text("fp_policy")? {
            (_, "abort") => NonConvergencePolicy::Abort,
            (_, "warn") => NonConvergencePolicy::Warn,
            (_, "bisect") => NonConvergencePolicy::Bisect,
            (line, other) => return Err(CliError::parse(line, "fp_policy", format!("expected abort, warn or bisect, got `{other}`"))),
        };
        let (refine_line, refine_text) = raw.text("refine_problem")?;
        let refine_problem = Mode::parse(refine_text)
            .filter(|m| matches!(m, Mode::System | Mode::Myopic | Mode::Penalized | Mode::Obstacle))
            .ok_or_else(|| CliError::parse(refine_line, "refine_problem", format!("expected SYSTEM, MYOPIC, PENALIZED or OBSTACLE, got `{refine_text}`")))?;
        let sc = Scenario {
            mode,
            model,
            k,
            d,
            x_min: raw.dims("x_min", k)?,
            x_max: raw.dims("x_max", k)?,
            n_x: raw.dims("n_x", k)?,
            y_min: raw.dims("y_min", d)?,
            y_max: raw.dims("y_max", d)?,
            n_y: raw.dims("n_y", d)?,
            horizon: raw.get("T")?,
            dt: raw.get("dt")?,
            tol_fp: raw.get("tol_fp")?,
            theta: raw.get("theta")?,
            max_iter: raw.get("max_iter")?,
            fp_policy,
            tie_tol: raw.get("tie_tol")?,
            inner_sweeps: raw.get("inner_sweeps")?,
            snapshot_every: raw.get("snapshot_every")?,
            blowup_bound: raw.get("blowup_bound")?,
            model_params,
            stopping,
            stop_params,
            tol_c: raw.get("tol_c")?,
            compat_threshold: raw.get("compat_threshold")?,
            t1: raw.get("t1")?,
            lambdas: raw.list("lambdas")?,
            epsilons: raw.list("epsilons")?,
            refine_problem,
            levels: raw.get("levels")?,
            memory_limit_mb: raw.get("memory_limit_mb")?,
            particles: raw.get("particles")?,
            particle_counts: raw.list("particle_counts")?,
            replicas: raw.get("replicas")?,
            oracle_times: raw.list("oracle_times")?,
            x0: raw.list("x0")?,
            y0: raw.list("y0")?,
            u_frozen: raw.list("u_frozen")?,
            alpha_frozen: raw.list("alpha_frozen")?,
            fd_samples: raw.get("fd_samples")?,
            seed: raw.get("seed")?,
            output: raw.text("output")?.1.to_string(),
        };
        sc.check_consistency(&raw)?;
        Ok(sc)
    }

    fn check_consistency(&self, raw: &Raw) -> Result<(), CliError> {
        let needs_stop = matches!(self.mode, Mode::Penalized | Mode::Obstacle | Mode::EpsilonSweep)
            || (self.mode == Mode::Refine && matches!(self.refine_problem, Mode::Penalized | Mode::Obstacle));
        if needs_stop && self.stopping.is_none() {
            return Err(CliError::parse(None, "stopping", format!("mode {} needs a stopping profile", self.mode.name())));
        }
        if self.mode == Mode::Oracle {
            for (key, len, want) in [
                ("x0", self.x0.len(), self.k),
                ("u_frozen", self.u_frozen.len(), self.k),
                ("y0", self.y0.len(), self.d),
                ("alpha_frozen", self.alpha_frozen.len(), self.d),
            ] {
                if len != want {
                    return Err(CliError::parse(raw.line(key), key, format!("{len} values given, expected {want}")));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(
            self.x_min.clone(),
            self.x_max.clone(),
            self.n_x.clone(),
            self.y_min.clone(),
            self.y_max.clone(),
            self.n_y.clone(),
            self.horizon,
            self.dt,
        )
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            fixed_point: FixedPointOptions {
                theta: self.theta,
                tol: self.tol_fp,
                max_iter: self.max_iter,
                policy: self.fp_policy,
            },
            tie_tol: self.tie_tol,
            snapshot_every: self.snapshot_every,
            blowup_bound: self.blowup_bound,
            inner_sweeps: self.inner_sweeps,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        Ok(builtin::model(&self.model, self.k, self.d, &self.model_params)?)
    }

    pub fn stopping_spec(&self) -> Result<Option<StoppingSpec>, CliError> {
        match &self.stopping {
            Some(name) => Ok(Some(builtin::stopping(name, &self.stop_params)?)),
            None => Ok(None),
        }
    }

    /// The system a REFINE study integrates.
    pub fn study_problem(&self) -> Result<StudyProblem, CliError> {
        let stop = || {
            self.stopping_spec()?
                .ok_or_else(|| CliError::parse(None, "stopping", "refine_problem needs a stopping profile"))
        };
        Ok(match self.refine_problem {
            Mode::Myopic => StudyProblem::Myopic,
            Mode::Penalized => StudyProblem::Penalized(stop()?),
            Mode::Obstacle => StudyProblem::Obstacle(stop()?),
            _ => StudyProblem::System,
        })
    }

    /// Fully resolved configuration in scenario syntax.
    pub fn to_manifest(&self, version: &str, workers: usize) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
        }
        let policy = match self.fp_policy {
            NonConvergencePolicy::Abort => "abort",
            NonConvergencePolicy::Warn => "warn",
            NonConvergencePolicy::Bisect => "bisect",
        };
        let mut lines = vec![
            format!("# major-mfg {version}"),
            format!("# workers = {workers}"),
            format!("mode = {}", self.mode.name()),
            format!("model = {}", self.model),
            format!("k = {}", self.k),
            format!("d = {}", self.d),
            format!("x_min = {}", list(&self.x_min)),
            format!("x_max = {}", list(&self.x_max)),
            format!("n_x = {}", list(&self.n_x)),
            format!("y_min = {}", list(&self.y_min)),
            format!("y_max = {}", list(&self.y_max)),
            format!("n_y = {}", list(&self.n_y)),
            format!("T = {}", self.horizon),
            format!("dt = {}", self.dt),
            format!("tol_fp = {}", self.tol_fp),
            format!("theta = {}", self.theta),
            format!("max_iter = {}", self.max_iter),
            format!("fp_policy = {policy}"),
            format!("tie_tol = {}", self.tie_tol),
            format!("inner_sweeps = {}", self.inner_sweeps),
            format!("snapshot_every = {}", self.snapshot_every),
            format!("blowup_bound = {}", self.blowup_bound),
        ];
        lines.extend(self.model_params.iter().map(|(k, v)| format!("param.{k} = {v}")));
        lines.push(format!("stopping = {}", self.stopping.as_deref().unwrap_or("none")));
        lines.extend(self.stop_params.iter().map(|(k, v)| format!("stop.{k} = {v}")));
        lines.extend([
            format!("tol_c = {}", self.tol_c),
            format!("compat_threshold = {}", self.compat_threshold),
            format!("t1 = {}", self.t1),
            format!("lambdas = {}", list(&self.lambdas)),
            format!("epsilons = {}", list(&self.epsilons)),
            format!("refine_problem = {}", self.refine_problem.name()),
            format!("levels = {}", self.levels),
            format!("memory_limit_mb = {}", self.memory_limit_mb),
            format!("particles = {}", self.particles),
            format!("particle_counts = {}", list(&self.particle_counts)),
            format!("replicas = {}", self.replicas),
            format!("oracle_times = {}", list(&self.oracle_times)),
            format!("x0 = {}", list(&self.x0)),
            format!("y0 = {}", list(&self.y0)),
            format!("u_frozen = {}", list(&self.u_frozen)),
            format!("alpha_frozen = {}", list(&self.alpha_frozen)),
            format!("fd_samples = {}", self.fd_samples),
            format!("seed = {}", self.seed),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}
