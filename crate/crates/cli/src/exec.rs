//! Mode dispatch and artifacts.
//!
//! Every run directory gets `manifest.txt` (the resolved scenario, runnable
//! as is) and `summary.txt`. Single runs add `diagnostics.csv` and
//! `snapshots/step_NNNNNN.csv`; obstacle runs and ε-sweeps add
//! `obstacle_report.csv`; sweeps write one CSV each; oracle runs write
//! `particles.csv` and `mc_convergence.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use major_mfg::builtin;
use major_mfg::evolution::{write_diagnostics_csv, write_snapshot_csv};
use major_mfg::limits::{self, EpsilonSweep, LambdaSweep, RefinementStudy};
use major_mfg::oracle::{self, McConvergence, ParticleTrajectory};
use major_mfg::stopping::{obstacle_report, ObstacleReport};
use major_mfg::{Problem, RunDiagnostics, Solver, SystemState};

use crate::error::CliError;
use crate::scenario::{Mode, Scenario};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Step used to integrate the oracle's reference characteristics.
const ORACLE_ODE_DT: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub diagnostics: RunDiagnostics,
    pub final_state: SystemState,
    /// Obstacle sampled on the grid, for stopping runs.
    pub psi: Option<Vec<f64>>,
    pub obstacle_report: Option<ObstacleReport>,
}

#[derive(Clone, Debug)]
pub struct OracleOutcome {
    pub trajectory: ParticleTrajectory,
    pub reference: Vec<Vec<f64>>,
    pub mc: McConvergence,
    /// Largest `|particle - reference| / standard error` over times and states.
    pub max_z: f64,
    /// Largest drift of `Σ_i x_i` along the reference characteristic.
    pub mass_drift: f64,
}

#[derive(Clone, Debug)]
pub enum Outcome {
    Run(RunOutcome),
    Lambda(LambdaSweep),
    Epsilon(EpsilonSweep),
    Refine(RefinementStudy),
    Oracle(OracleOutcome),
}

impl Outcome {
    /// Largest control fixed-point residual seen, when the mode solves any.
    pub fn max_fp_residual(&self) -> Option<f64> {
        match self {
            Outcome::Run(r) => Some(r.diagnostics.max_fp_residual()),
            Outcome::Lambda(s) => Some(s.max_fp_residual),
            Outcome::Epsilon(s) => Some(s.max_fp_residual),
            Outcome::Refine(s) => Some(s.max_fp_residual),
            Outcome::Oracle(_) => None,
        }
    }

    pub fn warnings(&self) -> &[String] {
        match self {
            Outcome::Run(r) => &r.diagnostics.warnings,
            Outcome::Lambda(s) => &s.warnings,
            Outcome::Epsilon(s) => &s.warnings,
            Outcome::Refine(_) | Outcome::Oracle(_) => &[],
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Run `sc` and write its artifacts into `out`, which is created if needed.
pub fn execute(sc: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let manifest = sc.to_manifest(VERSION, rayon::current_num_threads());
    write_file(&out.join("manifest.txt"), |w| w.write_all(manifest.as_bytes()))?;
    let outcome = match sc.mode {
        Mode::System | Mode::Myopic | Mode::Penalized | Mode::Obstacle => single_run(sc, out),
        Mode::LambdaSweep => lambda_mode(sc, out),
        Mode::EpsilonSweep => epsilon_mode(sc, out),
        Mode::Refine => refine_mode(sc, out),
        Mode::Oracle => oracle_mode(sc, out),
    }?;
    let summary = summary_lines(sc, &outcome);
    write_file(&out.join("summary.txt"), |w| {
        for line in &summary {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    Ok(outcome)
}

fn single_run(sc: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    let spec = sc.model_spec()?;
    let grid = sc.grid();
    let cfg = sc.solver_config();
    let stop = sc.stopping_spec()?;
    let problem = match (sc.mode, &stop) {
        (Mode::Penalized, Some(s)) => Problem::Penalized(s),
        (Mode::Obstacle, Some(s)) => Problem::Obstacle(s),
        (Mode::Myopic, _) => Problem::Myopic,
        _ => Problem::System,
    };
    let solver = Solver::new(&spec, &grid, &cfg, problem)?;
    let snap_dir = out.join("snapshots");
    fs::create_dir_all(&snap_dir).map_err(|source| CliError::Io {
        path: snap_dir.clone(),
        source,
    })?;
    let mut last: Option<SystemState> = None;
    let mut io_error: Option<CliError> = None;
    let mut diag = RunDiagnostics::default();
    let result = solver.run_into(
        &mut |s| {
            if io_error.is_none() {
                let path = snap_dir.join(format!("step_{:06}.csv", s.step));
                if let Err(e) = write_file(&path, |w| write_snapshot_csv(&grid, s, w)) {
                    io_error = Some(e);
                }
            }
            last = Some(s.clone());
        },
        &mut diag,
    );
    // diagnostics are flushed whatever happened to the run
    write_file(&out.join("diagnostics.csv"), |w| write_diagnostics_csv(&diag, w))?;
    result?;
    if let Some(e) = io_error {
        return Err(e);
    }
    let final_state = last.expect("the initial state is always observed");
    let psi = solver.psi().map(<[f64]>::to_vec);
    let report = match (sc.mode, &psi) {
        (Mode::Obstacle, Some(psi)) => {
            let report = obstacle_report(&grid, &final_state, psi, sc.tol_c);
            write_file(&out.join("obstacle_report.csv"), |w| report.write_csv(&grid, w))?;
            Some(report)
        }
        _ => None,
    };
    if diag.blowup_tripped {
        return Err(CliError::Aborted(diag.warnings.first().cloned().unwrap_or_default()));
    }
    Ok(Outcome::Run(RunOutcome {
        diagnostics: diag,
        final_state,
        psi,
        obstacle_report: report,
    }))
}

fn lambda_mode(sc: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    let spec = sc.model_spec()?;
    let sweep = limits::lambda_sweep(&spec, &sc.grid(), &sc.solver_config(), &sc.lambdas, sc.t1)?;
    write_file(&out.join("lambda_sweep.csv"), |w| {
        limits::write_sweep_csv(&sweep.u_norms, Some(("phi_gap", &sweep.phi_gaps)), w)
    })?;
    Ok(Outcome::Lambda(sweep))
}

fn epsilon_mode(sc: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    let spec = sc.model_spec()?;
    let stop = sc.stopping_spec()?.expect("checked at parse time");
    let grid = sc.grid();
    let sweep = limits::epsilon_sweep(&spec, &grid, &stop, &sc.solver_config(), &sc.epsilons)?;
    write_file(&out.join("epsilon_sweep.csv"), |w| {
        limits::write_sweep_csv(&sweep.excess, Some(("obstacle_gap", &sweep.obstacle_gaps)), w)
    })?;
    if let Some(report) = &sweep.obstacle_report {
        write_file(&out.join("obstacle_report.csv"), |w| report.write_csv(&grid, w))?;
    }
    Ok(Outcome::Epsilon(sweep))
}

fn refine_mode(sc: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    let spec = sc.model_spec()?;
    let problem = sc.study_problem()?;
    let limit = sc.memory_limit_mb.saturating_mul(1 << 20);
    let study = limits::refinement_study(&problem, &spec, &sc.grid(), &sc.solver_config(), sc.levels, limit)?;
    write_file(&out.join("refinement.csv"), |w| {
        writeln!(w, "level,n_x,n_y,dt,phi_diff,u_diff,order")?;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        for (l, g) in study.grids.iter().enumerate() {
            let cell = |v: Option<&f64>| v.map_or(String::new(), f64::to_string);
            let diff = l.checked_sub(1);
            writeln!(
                w,
                "{l},{},{},{},{},{},{}",
                join(&g.n_x),
                join(&g.n_y),
                g.dt,
                cell(diff.and_then(|i| study.phi_diffs.get(i))),
                cell(diff.and_then(|i| study.u_diffs.get(i))),
                cell(l.checked_sub(2).and_then(|i| study.orders.get(i))),
            )?;
        }
        writeln!(
            w,
            "# observed_order={} error_estimate={} u_error_estimate={} truncated={}",
            study.observed_order.map_or("none".to_string(), |o| o.to_string()),
            study.error_estimate,
            study.u_error_estimate,
            study.truncated
        )
    })?;
    Ok(Outcome::Refine(study))
}

fn oracle_mode(sc: &Scenario, out: &Path) -> Result<Outcome, CliError> {
    if sc.model != "lq" {
        return Err(CliError::Usage(format!(
            "ORACLE mode needs a rate-matrix crowd coupling; model `{}` has none",
            sc.model
        )));
    }
    let spec = sc.model_spec()?;
    let p = &sc.model_params;
    let rc = builtin::exchange_rates(sc.k, p["r0"], p["kappa_a"], p["gamma"]);
    let (x0, y, u, alpha) = (&sc.x0, &sc.y0, &sc.u_frozen, &sc.alpha_frozen);
    let times = &sc.oracle_times;
    let reference = oracle::characteristic_ode(&spec.crowd_drift, x0, y, u, alpha, times, ORACLE_ODE_DT);
    let trajectory = oracle::particle_simulate(&rc, x0, y, u, alpha, sc.particles, times, sc.seed)?;
    let mc = oracle::mc_convergence(&rc, x0, y, u, alpha, &sc.particle_counts, times, &reference, sc.replicas, sc.seed)?;
    let mut max_z: f64 = 0.0;
    for (h, (se, r)) in trajectory.histograms.iter().zip(trajectory.std_errors.iter().zip(&reference)) {
        for i in 0..sc.k {
            let gap = (h[i] - r[i]).abs();
            let z = if se[i] > 0.0 { gap / se[i] } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
            max_z = max_z.max(z);
        }
    }
    let mass0: f64 = x0.iter().sum();
    let mass_drift = reference.iter().map(|x| (x.iter().sum::<f64>() - mass0).abs()).fold(0.0, f64::max);
    write_file(&out.join("particles.csv"), |w| oracle::write_particle_csv(&trajectory, &reference, w))?;
    write_file(&out.join("mc_convergence.csv"), |w| {
        writeln!(w, "particles,rms_error")?;
        for (n, e) in mc.particle_counts.iter().zip(&mc.rms_errors) {
            writeln!(w, "{n},{e}")?;
        }
        writeln!(w, "# slope={} replicas={} seed={}", mc.slope.map_or("none".to_string(), |s| s.to_string()), sc.replicas, sc.seed)
    })?;
    Ok(Outcome::Oracle(OracleOutcome {
        trajectory,
        reference,
        mc,
        max_z,
        mass_drift,
    }))
}

fn summary_lines(sc: &Scenario, outcome: &Outcome) -> Vec<String> {
    let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
    let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    let mut lines = vec![format!("mode = {}", sc.mode.name())];
    match outcome {
        Outcome::Run(r) => {
            let d = &r.diagnostics;
            lines.push(format!("effective_horizon = {}", d.effective_horizon));
            lines.push(format!("final_sup_phi = {}", r.final_state.phi.sup_norm()));
            lines.push(format!("final_sup_u = {}", r.final_state.u.sup_norm()));
            lines.push(format!("max_cfl = {}", d.cfl_numbers.iter().copied().fold(0.0, f64::max)));
            lines.push(format!("final_excess = {}", d.excess.last().copied().unwrap_or(0.0)));
            if let Some(rep) = &r.obstacle_report {
                lines.push(format!("max_violation = {}", rep.max_violation));
                lines.push(format!("max_residual_off_contact = {}", rep.max_residual_off_contact));
                lines.push(format!("contact_fraction = {}", rep.contact_fraction()));
            }
        }
        Outcome::Lambda(s) => {
            lines.push(format!("u_norms = {}", list(&s.u_norms.norms)));
            lines.push(format!("u_slope = {}", opt(s.u_norms.slope)));
            lines.push(format!("phi_gaps = {}", list(&s.phi_gaps.norms)));
            lines.push(format!("phi_slope = {}", opt(s.phi_gaps.slope)));
        }
        Outcome::Epsilon(s) => {
            lines.push(format!("excess = {}", list(&s.excess.norms)));
            lines.push(format!("excess_slope = {}", opt(s.excess.slope)));
            lines.push(format!("obstacle_gaps = {}", list(&s.obstacle_gaps.norms)));
        }
        Outcome::Refine(s) => {
            lines.push(format!("phi_diffs = {}", list(&s.phi_diffs)));
            lines.push(format!("u_diffs = {}", list(&s.u_diffs)));
            lines.push(format!("observed_order = {}", opt(s.observed_order)));
            lines.push(format!("error_estimate = {}", s.error_estimate));
            lines.push(format!("u_error_estimate = {}", s.u_error_estimate));
            lines.push(format!("truncated = {}", s.truncated));
        }
        Outcome::Oracle(o) => {
            lines.push(format!("max_z = {}", o.max_z));
            lines.push(format!("mc_slope = {}", opt(o.mc.slope)));
            lines.push(format!("mass_drift = {}", o.mass_drift));
        }
    }
    if let Some(r) = outcome.max_fp_residual() {
        lines.push(format!("max_fp_residual = {r}"));
    }
    lines.extend(outcome.warnings().iter().map(|w| format!("warning = {w}")));
    lines
}

/// Output directory: an explicit `--out` wins, otherwise the scenario's
/// `output` name (or the file stem) under `root`.
pub fn output_dir(sc: &Scenario, file: &Path, explicit: Option<&Path>, root: &Path) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    if !sc.output.is_empty() {
        return root.join(&sc.output);
    }
    let stem = file.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    root.join(stem)
}
