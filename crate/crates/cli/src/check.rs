//! Dry-run validation of a scenario: nothing is integrated.

use std::fmt;

use major_mfg::fixedpoint::solve_alpha_star;
use major_mfg::model::validate_model;
use major_mfg::oracle::fd_check_gradp;
use major_mfg::stopping::ubar_compatibility;
use major_mfg::{Problem, Solver};

use crate::scenario::{Mode, Scenario};

/// Largest relative gap between the supplied `∂_p F` and finite differences.
pub const FD_TOL: f64 = 1e-6;

/// Starting guesses of the multiplicity probe, as multiples of `1 + |p|`.
const PROBE_STARTS: [f64; 3] = [0.0, -4.0, 4.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckItem {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl fmt::Display for CheckItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Warn => "WARN",
            Status::Fail => "FAIL",
        };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn failures(&self) -> usize {
        self.items.iter().filter(|i| i.status == Status::Fail).count()
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }

    fn push(&mut self, name: &'static str, status: Status, detail: impl Into<String>) {
        self.items.push(CheckItem {
            name,
            status,
            detail: detail.into(),
        });
    }
}

/// Model and grid validation, the CFL certificate at `t = 0`, the `∂_p F`
/// finite-difference check, a multiplicity probe of the control fixed point
/// and, with a stopping profile, the `Ū` compatibility diagnostic. Schema errors are caught earlier, when the
/// scenario is parsed.
pub fn check(sc: &Scenario) -> CheckReport {
    let mut report = CheckReport::default();
    report.push("schema", Status::Pass, format!("mode {}, model {}", sc.mode.name(), sc.model));
    let grid = sc.grid();
    let spec = match sc.model_spec() {
        Ok(spec) => spec,
        Err(e) => {
            report.push("model", Status::Fail, e.to_string());
            return report;
        }
    };
    match grid.validate().and_then(|_| validate_model(&spec, &grid)) {
        Ok(v) => {
            let mass = if v.mass_conserving { "mass-conserving" } else { "not mass-conserving" };
            report.push("model", Status::Pass, format!("{} samples, {mass}", v.samples));
        }
        Err(e) => {
            report.push("model", Status::Fail, e.to_string());
            return report;
        }
    }
    let stop = match sc.stopping_spec() {
        Ok(s) => s,
        Err(e) => {
            report.push("stopping", Status::Fail, e.to_string());
            return report;
        }
    };
    let cfg = sc.solver_config();
    let problem = match (sc.mode, &stop) {
        (Mode::Penalized, Some(s)) => Problem::Penalized(s),
        (Mode::Obstacle | Mode::EpsilonSweep, Some(s)) => Problem::Obstacle(s),
        (Mode::Myopic, _) => Problem::Myopic,
        _ => Problem::System,
    };
    let dt_max = Solver::new(&spec, &grid, &cfg, problem).and_then(|s| {
        let state = s.initial_state()?;
        s.cfl_certificate(&state)
    });
    match dt_max {
        Ok(dt_max) if sc.dt <= dt_max * (1.0 + 1e-12) => {
            report.push("cfl", Status::Pass, format!("dt = {} within dt_max = {dt_max} at t = 0", sc.dt));
        }
        Ok(dt_max) => report.push("cfl", Status::Fail, format!("dt = {} exceeds dt_max = {dt_max}", sc.dt)),
        Err(e) => report.push("cfl", Status::Fail, e.to_string()),
    }
    match fd_check_gradp(&spec, sc.fd_samples, sc.seed) {
        Ok(err) if spec.hamiltonian_grad_p.is_none() => {
            report.push("fd_gradp", Status::Pass, format!("no analytic gradient supplied (error {err})"));
        }
        Ok(err) if err <= FD_TOL => report.push("fd_gradp", Status::Pass, format!("relative error {err:e}")),
        Ok(err) => report.push("fd_gradp", Status::Fail, format!("relative error {err:e} exceeds {FD_TOL:e}")),
        Err(e) => report.push("fd_gradp", Status::Fail, e.to_string()),
    }
    match multiplicity_probe(sc, &spec, &grid, &cfg.fixed_point) {
        Ok(None) => report.push("fp_multiplicity", Status::Pass, "every start reached the same root"),
        Ok(Some(detail)) => report.push("fp_multiplicity", Status::Warn, detail),
        Err(e) => report.push("fp_multiplicity", Status::Warn, format!("probe did not converge: {e}")),
    }
    if let Some(stop) = &stop {
        match ubar_compatibility(&spec, &grid, stop, &cfg, sc.compat_threshold) {
            Ok(c) => match c.warning {
                Some(w) => report.push("ubar_compatibility", Status::Warn, w),
                None => report.push("ubar_compatibility", Status::Pass, format!("residual {:e}", c.max_residual)),
            },
            Err(e) => report.push("ubar_compatibility", Status::Fail, e.to_string()),
        }
    }
    report
}

/// Solve the control fixed point from several starting guesses at random
/// points of the grid box and describe the first point where the roots
/// disagree. Uniqueness is not guaranteed for non-contractive maps, so this
/// only flags suspicion.
fn multiplicity_probe(
    sc: &Scenario,
    spec: &major_mfg::ModelSpec,
    grid: &major_mfg::GridSpec,
    opts: &major_mfg::FixedPointOptions,
) -> major_mfg::Result<Option<String>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sc.seed);
    let (k, d) = (sc.k, sc.d);
    let tol = 10.0 * opts.tol.max(f64::EPSILON);
    for _ in 0..sc.fd_samples {
        let x: Vec<f64> = (0..k).map(|i| rng.gen_range(grid.x_min[i]..=grid.x_max[i])).collect();
        let y: Vec<f64> = (0..d).map(|j| rng.gen_range(grid.y_min[j]..=grid.y_max[j])).collect();
        let u: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let scale = 1.0 + p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut roots: Vec<Vec<f64>> = Vec::new();
        for s in PROBE_STARTS {
            let start = vec![s * scale; d];
            roots.push(solve_alpha_star(spec, &x, &y, &u, &p, Some(&start), opts)?);
        }
        let spread = roots
            .iter()
            .flat_map(|r| r.iter().zip(&roots[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread > tol {
            return Ok(Some(format!(
                "different starts reached roots {spread:e} apart at x = {x:?}, y = {y:?}, p = {p:?}"
            )));
        }
    }
    Ok(None)
}
