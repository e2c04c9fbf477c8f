//! Parameter sweeps for the large-λ and small-ε limits, and grid
//! self-convergence studies.

use std::io::Write;

use crate::error::{Error, Result};
use crate::evolution::{Problem, RunDiagnostics, Solver, SolverConfig, SystemState};
use crate::grid::GridSpec;
use crate::model::{ModelSpec, StoppingSpec};
use crate::oracle::loglog_slope;
use crate::stopping::{solve_obstacle, ObstacleReport};

/// Norms recorded against a swept parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub parameter_name: String,
    pub parameters: Vec<f64>,
    pub norms: Vec<f64>,
    /// Least-squares slope of `ln norm` against `ln parameter` (absent when a
    /// norm is zero or fewer than 3 points).
    pub slope: Option<f64>,
    /// Time window `(t1, T)` of the norms.
    pub window: (f64, f64),
}

impl SweepResult {
    fn new(name: &str, parameters: Vec<f64>, norms: Vec<f64>, window: (f64, f64)) -> Self {
        let slope = if parameters.len() >= 3 {
            loglog_slope(&parameters, &norms)
        } else {
            None
        };
        SweepResult {
            parameter_name: name.to_string(),
            parameters,
            norms,
            slope,
            window,
        }
    }

    /// Norms strictly decrease along the parameter order.
    pub fn strictly_decreasing(&self) -> bool {
        self.norms.windows(2).all(|w| w[1] < w[0])
    }

    /// Norms do not increase along the parameter order.
    pub fn nonincreasing(&self) -> bool {
        self.norms.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSweep {
    /// `sup |U_λ|` over the window.
    pub u_norms: SweepResult,
    /// `sup |φ_λ - φ_myopic|` over the window.
    pub phi_gaps: SweepResult,
    /// Largest control fixed-point residual over every run and step.
    pub max_fp_residual: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSweep {
    /// Final-time `sup (φ_ε - ψ)⁺`.
    pub excess: SweepResult,
    /// Final-time `sup |φ_ε - φ_obstacle|`.
    pub obstacle_gaps: SweepResult,
    /// Final complementarity report of the obstacle reference, with contact
    /// meaning `φ = ψ` exactly.
    pub obstacle_report: Option<ObstacleReport>,
    /// Largest control fixed-point residual over every run and step.
    pub max_fp_residual: f64,
    pub warnings: Vec<String>,
}

fn check_sweep_values(name: &str, values: &[f64], increasing: bool) -> Result<()> {
    if values.len() < 3 {
        return Err(Error::validation(name, "a sweep needs at least 3 values"));
    }
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::validation(name, "sweep values must be positive and finite"));
    }
    let ordered = values
        .windows(2)
        .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
    if !ordered {
        let dir = if increasing { "increasing" } else { "decreasing" };
        return Err(Error::validation(name, format!("sweep values must be strictly {dir}")));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if hi / lo < 100.0 * (1.0 - 1e-12) {
        return Err(Error::validation(name, "sweep values must span at least 2 decades"));
    }
    Ok(())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sup_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// For each λ, integrate the full system alongside the myopic reduction and
/// record `sup |U_λ|` and `sup |φ_λ - φ_myopic|` over `[t1, T]` (every step
/// in the window is inspected).
pub fn lambda_sweep(
    spec: &ModelSpec,
    grid: &GridSpec,
    cfg: &SolverConfig,
    lambdas: &[f64],
    t1: f64,
) -> Result<LambdaSweep> {
    check_sweep_values("lambdas", lambdas, true)?;
    if !(t1 > 0.0 && t1 < grid.horizon) {
        return Err(Error::validation("t1", "t1 must lie in (0, T)"));
    }
    let myopic = Solver::new(spec, grid, cfg, Problem::Myopic)?;
    let members: Vec<ModelSpec> = lambdas.iter().map(|&l| spec.with_crowd_discount(l)).collect();
    let solvers = members
        .iter()
        .map(|m| Solver::new(m, grid, cfg, Problem::System))
        .collect::<Result<Vec<_>>>()?;
    let sweep_err = |lambda: f64| {
        move |e: Error| Error::Sweep {
            parameter: lambda,
            message: e.to_string(),
        }
    };
    // The myopic reference is shared, so every member advances in lock-step
    // with it; a member that blows up inside the window just stops early.
    let mut states = Vec::with_capacity(solvers.len());
    for (solver, &lambda) in solvers.iter().zip(lambdas) {
        states.push(Some(solver.initial_state().map_err(sweep_err(lambda))?));
    }
    let mut m = myopic.initial_state()?;
    let mut max_fp_residual = myopic.initial_residual(&m)?;
    for (solver, state) in solvers.iter().zip(&states) {
        if let Some(s) = state {
            max_fp_residual = max_fp_residual.max(solver.initial_residual(s)?);
        }
    }
    let mut u_norms = vec![0.0_f64; lambdas.len()];
    let mut phi_gaps = vec![0.0_f64; lambdas.len()];
    let mut warnings = Vec::new();
    for step in 1..=grid.step_count() {
        let t = grid.time_at(step);
        let dt = t - m.t;
        let (next_m, res_m, ..) = myopic.step(&m, dt)?;
        max_fp_residual = max_fp_residual.max(res_m);
        m = next_m;
        m.t = t;
        let in_window = t >= t1 - 1e-12 * grid.horizon;
        for (i, &lambda) in lambdas.iter().enumerate() {
            let Some(s) = &states[i] else { continue };
            match solvers[i].step(s, dt) {
                Ok((mut next, res, ..)) => {
                    next.t = t;
                    max_fp_residual = max_fp_residual.max(res);
                    if in_window {
                        u_norms[i] = u_norms[i].max(sup_abs(&next.u.values));
                        phi_gaps[i] = phi_gaps[i].max(sup_diff(&next.phi.values, &m.phi.values));
                    }
                    states[i] = Some(next);
                }
                Err(Error::BlowUp { t: tb, sup_norm }) => {
                    if s.t < t1 {
                        return Err(Error::Sweep {
                            parameter: lambda,
                            message: format!("blow-up at t = {tb} (sup norm {sup_norm:e}) before t1 = {t1}"),
                        });
                    }
                    warnings.push(format!("lambda = {lambda}: blow-up at t = {tb}, window truncated to t = {}", s.t));
                    states[i] = None;
                }
                Err(e) => return Err(sweep_err(lambda)(e)),
            }
        }
    }
    let window = (t1, grid.horizon);
    let u_sweep = SweepResult::new("lambda", lambdas.to_vec(), u_norms, window);
    let phi_sweep = SweepResult::new("lambda", lambdas.to_vec(), phi_gaps, window);
    if !u_sweep.strictly_decreasing() || !phi_sweep.strictly_decreasing() {
        warnings.push("non-monotone norms along the lambda sweep".to_string());
    }
    Ok(LambdaSweep {
        u_norms: u_sweep,
        phi_gaps: phi_sweep,
        max_fp_residual,
        warnings,
    })
}

fn final_state(solver: &Solver<'_>) -> Result<(SystemState, RunDiagnostics)> {
    let mut last = None;
    let diag = solver.run(&mut |s| last = Some(s.clone()))?;
    Ok((last.expect("initial state is always observed"), diag))
}

/// For each ε, run the penalized system and record the final-time
/// `sup (φ_ε - ψ)⁺` and the final-time gap to the obstacle solution.
pub fn epsilon_sweep(
    spec: &ModelSpec,
    grid: &GridSpec,
    stop: &StoppingSpec,
    cfg: &SolverConfig,
    epsilons: &[f64],
) -> Result<EpsilonSweep> {
    check_sweep_values("epsilons", epsilons, false)?;
    let obstacle = solve_obstacle(spec, grid, stop, cfg, 0.0)?;
    let mut warnings = obstacle.run.diagnostics.warnings.clone();
    let mut max_fp_residual = obstacle.run.diagnostics.max_fp_residual();
    let phi_obs = &obstacle.run.final_state().phi.values;
    let psi = &obstacle.psi;
    let mut excess = Vec::new();
    let mut gaps = Vec::new();
    for &eps in epsilons {
        let member = stop.with_epsilon(eps);
        let solver = Solver::new(spec, grid, cfg, Problem::Penalized(&member))?;
        let (last, diag) = final_state(&solver).map_err(|e| Error::Sweep {
            parameter: eps,
            message: e.to_string(),
        })?;
        max_fp_residual = max_fp_residual.max(diag.max_fp_residual());
        if diag.blowup_tripped {
            return Err(Error::Sweep {
                parameter: eps,
                message: format!("blow-up guard tripped; run frozen at t = {}", last.t),
            });
        }
        let ex = last
            .phi
            .values
            .iter()
            .zip(psi)
            .map(|(f, s)| (f - s).max(0.0))
            .fold(0.0, f64::max);
        excess.push(ex);
        gaps.push(sup_diff(&last.phi.values, phi_obs));
    }
    let window = (grid.horizon, grid.horizon);
    let excess = SweepResult::new("epsilon", epsilons.to_vec(), excess, window);
    let obstacle_gaps = SweepResult::new("epsilon", epsilons.to_vec(), gaps, window);
    if !excess.nonincreasing() {
        warnings.push("excess does not decrease with epsilon".to_string());
    }
    let obstacle_report = obstacle.final_report().cloned();
    Ok(EpsilonSweep {
        excess,
        obstacle_gaps,
        obstacle_report,
        max_fp_residual,
        warnings,
    })
}

/// Which system a refinement study integrates.
#[derive(Clone, Debug)]
pub enum StudyProblem {
    System,
    Myopic,
    Penalized(StoppingSpec),
    Obstacle(StoppingSpec),
}

impl StudyProblem {
    fn as_problem(&self) -> Problem<'_> {
        match self {
            StudyProblem::System => Problem::System,
            StudyProblem::Myopic => Problem::Myopic,
            StudyProblem::Penalized(s) => Problem::Penalized(s),
            StudyProblem::Obstacle(s) => Problem::Obstacle(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementStudy {
    pub grids: Vec<GridSpec>,
    /// Sup difference of the final φ between consecutive levels, on the
    /// coarse nodes.
    pub phi_diffs: Vec<f64>,
    /// Same for the crowd field.
    pub u_diffs: Vec<f64>,
    /// `log2` ratios of consecutive φ differences.
    pub orders: Vec<f64>,
    /// Last entry of `orders`.
    pub observed_order: Option<f64>,
    /// Richardson estimate of the error of the finest level's φ.
    pub error_estimate: f64,
    /// Same estimate for the crowd field, from the crowd differences.
    pub u_error_estimate: f64,
    /// A level was skipped because it exceeded the memory limit.
    pub truncated: bool,
    pub max_fp_residual: f64,
}

impl RefinementStudy {
    /// The study as a sweep over the time step.
    pub fn as_sweep(&self) -> SweepResult {
        let dts = self.grids.iter().skip(1).map(|g| g.dt).collect();
        let horizon = self.grids.first().map_or(0.0, |g| g.horizon);
        SweepResult::new("dt", dts, self.phi_diffs.clone(), (horizon, horizon))
    }
}

/// Rough memory footprint of one run on `grid`.
pub fn estimated_bytes(grid: &GridSpec) -> usize {
    let per_node = 3 * (2 * grid.k() + grid.d() + 6) + 2 * (grid.k() + grid.d());
    grid.node_count() * per_node * std::mem::size_of::<f64>()
}

/// Self-convergence study: run `levels` grids, each halving every spacing
/// and the time step of the previous one, and compare final fields on the
/// coarse nodes. Levels whose footprint exceeds `memory_limit` bytes are
/// dropped and the study is marked truncated.
pub fn refinement_study(
    problem: &StudyProblem,
    spec: &ModelSpec,
    grid: &GridSpec,
    cfg: &SolverConfig,
    levels: usize,
    memory_limit: usize,
) -> Result<RefinementStudy> {
    if levels < 2 {
        return Err(Error::validation("levels", "a refinement study needs at least 2 levels"));
    }
    let mut grids = vec![grid.clone()];
    let mut truncated = false;
    while grids.len() < levels {
        let next = grids.last().expect("non-empty").refined();
        if estimated_bytes(&next) > memory_limit {
            truncated = true;
            break;
        }
        grids.push(next);
    }
    let mut finals: Vec<SystemState> = Vec::new();
    let mut max_fp_residual: f64 = 0.0;
    for g in &grids {
        let solver = Solver::new(spec, g, cfg, problem.as_problem())?;
        let (last, diag) = final_state(&solver)?;
        max_fp_residual = max_fp_residual.max(diag.max_fp_residual());
        if diag.blowup_tripped {
            return Err(Error::Sweep {
                parameter: g.dt,
                message: "blow-up guard tripped during the refinement study".to_string(),
            });
        }
        finals.push(last);
    }
    let mut phi_diffs = Vec::new();
    let mut u_diffs = Vec::new();
    for l in 1..grids.len() {
        let (coarse, fine) = (&grids[l - 1], &grids[l]);
        let (sc, sf) = (&finals[l - 1], &finals[l]);
        let (nc, nf) = (coarse.node_count(), fine.node_count());
        let mut dphi: f64 = 0.0;
        let mut du: f64 = 0.0;
        for node in 0..nc {
            let f = coarse.coarse_to_fine(fine, node);
            dphi = dphi.max((sc.phi.values[node] - sf.phi.values[f]).abs());
            for c in 0..coarse.k() {
                du = du.max((sc.u.values[c * nc + node] - sf.u.values[c * nf + f]).abs());
            }
        }
        phi_diffs.push(dphi);
        u_diffs.push(du);
    }
    let orders: Vec<f64> = phi_diffs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let observed_order = orders.last().copied().filter(|o| o.is_finite());
    let error_estimate = richardson(&phi_diffs);
    let u_error_estimate = richardson(&u_diffs);
    Ok(RefinementStudy {
        grids,
        phi_diffs,
        u_diffs,
        orders,
        observed_order,
        error_estimate,
        u_error_estimate,
        truncated,
        max_fp_residual,
    })
}

/// Error of the finest level from consecutive differences, using the last
/// observed order when it is meaningful and first order otherwise.
fn richardson(diffs: &[f64]) -> f64 {
    let last = *diffs.last().expect("at least one difference");
    let p = match diffs {
        [.., a, b] => Some((a / b).log2()).filter(|p| p.is_finite() && *p > 0.1),
        _ => None,
    }
    .unwrap_or(1.0);
    last / (2f64.powf(p) - 1.0)
}

/// CSV of one or two sweeps over the same parameters, with a `#` footer of
/// fitted slopes.
pub fn write_sweep_csv<W: Write>(primary: &SweepResult, secondary: Option<(&str, &SweepResult)>, mut w: W) -> std::io::Result<()> {
    match secondary {
        Some((name, _)) => writeln!(w, "{},norm,{}", primary.parameter_name, name)?,
        None => writeln!(w, "{},norm", primary.parameter_name)?,
    }
    for (i, p) in primary.parameters.iter().enumerate() {
        match secondary {
            Some((_, s)) => writeln!(w, "{},{},{}", p, primary.norms[i], s.norms[i])?,
            None => writeln!(w, "{},{}", p, primary.norms[i])?,
        }
    }
    let fmt = |s: Option<f64>| s.map_or("none".to_string(), |v| v.to_string());
    write!(w, "# slope={} window={},{}", fmt(primary.slope), primary.window.0, primary.window.1)?;
    if let Some((name, s)) = secondary {
        write!(w, " slope_{}={}", name, fmt(s.slope))?;
    }
    writeln!(w)
}
