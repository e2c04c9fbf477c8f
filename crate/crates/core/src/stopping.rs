//! Optimal stopping by the major player: the penalized system with
//! bounded stopping intensity and its obstacle limit.
//!
//! In the penalized system the φ-equation gains `-β*(φ - ψ)⁺` and every
//! crowd component gains `-β*(U_i - Ū_i)`, with `β* = 1/ε` on `{φ > ψ}`.
//! Both terms are applied pointwise-implicitly after the transport and
//! diffusion stages, so `ε` far below `dt` stays stable.
//!
//! In the obstacle limit the implicit φ-stage becomes a line complementarity
//! problem (`φ ≤ ψ`, PDE residual `≤ 0`, one of them tight), and the crowd
//! value is reset to `Ū` on the contact set `{φ = ψ}`.

use std::io::Write;

use crate::error::Result;
use crate::evolution::{Problem, Run, Solver, SolverConfig, SystemState};
use crate::fixedpoint::solve_alpha_star;
use crate::grid::{central_at, second_difference_at, transport_at, GridSpec};
use crate::model::{ModelSpec, StoppingSpec};

/// Complementarity diagnostics of one obstacle snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleReport {
    pub t: f64,
    /// `|φ - ψ| ≤ tol_c`.
    pub contact_set: Vec<bool>,
    /// `|max(φ - ψ, PDE residual)|` per node.
    pub complementarity_residual: Vec<f64>,
    /// `sup (φ - ψ)⁺`.
    pub max_violation: f64,
    pub max_residual: f64,
    pub max_residual_off_contact: f64,
    /// Contact nodes with at least one non-contact neighbour.
    pub region_boundary_nodes: Vec<usize>,
    pub tol_c: f64,
    /// Sup gap to a small-ε penalized run, when one was attached.
    pub penalized_gap: Option<f64>,
}

impl ObstacleReport {
    pub fn contact_fraction(&self) -> f64 {
        if self.contact_set.is_empty() {
            return 0.0;
        }
        self.contact_set.iter().filter(|c| **c).count() as f64 / self.contact_set.len() as f64
    }

    /// Record the sup gap between this snapshot's φ and a penalized run's φ.
    pub fn attach_penalized_gap(&mut self, phi_obstacle: &[f64], phi_penalized: &[f64]) {
        let gap = phi_obstacle
            .iter()
            .zip(phi_penalized)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.penalized_gap = Some(gap);
    }

    /// Node table followed by a `#` summary line.
    pub fn write_csv<W: Write>(&self, grid: &GridSpec, mut w: W) -> std::io::Result<()> {
        let (k, d) = (grid.k(), grid.d());
        let mut header = vec!["node".to_string()];
        header.extend((1..=k).map(|i| format!("x{i}")));
        header.extend((1..=d).map(|j| format!("y{j}")));
        header.push("contact".into());
        header.push("residual".into());
        writeln!(w, "{}", header.join(","))?;
        let coords = grid.coordinates();
        for node in 0..self.contact_set.len() {
            let mut row = vec![node.to_string()];
            row.extend(coords[node * (k + d)..(node + 1) * (k + d)].iter().map(|c| c.to_string()));
            row.push(u8::from(self.contact_set[node]).to_string());
            row.push(self.complementarity_residual[node].to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        write!(
            w,
            "# t={} max_violation={} max_residual={} max_residual_off_contact={} contact_fraction={} tol_c={}",
            self.t,
            self.max_violation,
            self.max_residual,
            self.max_residual_off_contact,
            self.contact_fraction(),
            self.tol_c
        )?;
        if let Some(gap) = self.penalized_gap {
            write!(w, " penalized_gap={gap}")?;
        }
        writeln!(w)
    }
}

/// Per-node complementarity residual `|max(φ - ψ, r)|` and contact set
/// `{|φ - ψ| ≤ tol_c}`. Region boundaries are not computed (see
/// [`obstacle_report`]).
pub fn complementarity_residual(phi: &[f64], psi: &[f64], pde_residual: &[f64], tol_c: f64) -> ObstacleReport {
    let mut contact_set = Vec::with_capacity(phi.len());
    let mut residual = Vec::with_capacity(phi.len());
    let mut max_violation: f64 = 0.0;
    let mut max_residual: f64 = 0.0;
    let mut max_off: f64 = 0.0;
    for ((f, s), r) in phi.iter().zip(psi).zip(pde_residual) {
        let gap = f - s;
        let res = gap.max(*r).abs();
        let contact = gap.abs() <= tol_c;
        max_violation = max_violation.max(gap.max(0.0));
        max_residual = max_residual.max(res);
        if !contact {
            max_off = max_off.max(res);
        }
        contact_set.push(contact);
        residual.push(res);
    }
    ObstacleReport {
        t: 0.0,
        contact_set,
        complementarity_residual: residual,
        max_violation,
        max_residual,
        max_residual_off_contact: max_off,
        region_boundary_nodes: Vec::new(),
        tol_c,
        penalized_gap: None,
    }
}

/// Full report for an obstacle snapshot, including the region boundary.
pub fn obstacle_report(grid: &GridSpec, state: &SystemState, psi: &[f64], tol_c: f64) -> ObstacleReport {
    let zeros;
    let res = match &state.pde_residual {
        Some(r) => r.as_slice(),
        None => {
            zeros = vec![0.0; psi.len()];
            &zeros
        }
    };
    let mut report = complementarity_residual(&state.phi.values, psi, res, tol_c);
    report.t = state.t;
    let axes = grid.axes();
    for node in 0..report.contact_set.len() {
        if !report.contact_set[node] {
            continue;
        }
        let on_boundary = axes.iter().any(|ax| {
            let pos = ax.position(node);
            (pos > 0 && !report.contact_set[node - ax.stride]) || (pos + 1 < ax.len && !report.contact_set[node + ax.stride])
        });
        if on_boundary {
            report.region_boundary_nodes.push(node);
        }
    }
    report
}

/// Advance a penalized run by one step of `grid.dt`.
pub fn step_penalized(
    state: &SystemState,
    spec: &ModelSpec,
    grid: &GridSpec,
    stop: &StoppingSpec,
    cfg: &SolverConfig,
) -> Result<SystemState> {
    let solver = Solver::new(spec, grid, cfg, Problem::Penalized(stop))?;
    let (mut next, ..) = solver.step(state, grid.dt)?;
    next.t = state.t + grid.dt;
    Ok(next)
}

/// Full penalized run; `diagnostics.excess` holds `sup (φ - ψ)⁺` per step.
pub fn solve_penalized(spec: &ModelSpec, grid: &GridSpec, stop: &StoppingSpec, cfg: &SolverConfig) -> Result<Run> {
    Solver::new(spec, grid, cfg, Problem::Penalized(stop))?.run_collect()
}

/// An obstacle run with one report per emitted snapshot after `t = 0`.
#[derive(Clone, Debug)]
pub struct ObstacleRun {
    pub run: Run,
    pub reports: Vec<ObstacleReport>,
    /// `ψ` sampled on the grid.
    pub psi: Vec<f64>,
}

impl ObstacleRun {
    pub fn final_report(&self) -> Option<&ObstacleReport> {
        self.reports.last()
    }
}

/// Full obstacle run. `tol_c` is the contact tolerance of the reports.
pub fn solve_obstacle(
    spec: &ModelSpec,
    grid: &GridSpec,
    stop: &StoppingSpec,
    cfg: &SolverConfig,
    tol_c: f64,
) -> Result<ObstacleRun> {
    let solver = Solver::new(spec, grid, cfg, Problem::Obstacle(stop))?;
    let psi = solver.stop_field().map(|s| s.psi.clone()).unwrap_or_default();
    let mut snapshots = Vec::new();
    let mut reports = Vec::new();
    let diagnostics = solver.run(&mut |s| {
        if s.pde_residual.is_some() {
            reports.push(obstacle_report(grid, s, &psi, tol_c));
        }
        snapshots.push(s.clone());
    })?;
    Ok(ObstacleRun {
        run: Run { snapshots, diagnostics },
        reports,
        psi,
    })
}

/// Outcome of the `Ū` compatibility diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct CompatibilityReport {
    /// Sup over the grid of the crowd-equation residual with `U = Ū` frozen.
    pub max_residual: f64,
    pub threshold: f64,
    pub warning: Option<String>,
}

/// Residual of the stationary crowd equation
/// `(A·∇_x)Ū + α*·∇_yŪ - νΔ_yŪ + λŪ - B` with `U = Ū` frozen and `α*`
/// solved from `φ₀`. A warning is attached above `threshold`.
pub fn ubar_compatibility(
    spec: &ModelSpec,
    grid: &GridSpec,
    stop: &StoppingSpec,
    cfg: &SolverConfig,
    threshold: f64,
) -> Result<CompatibilityReport> {
    let (k, d) = (spec.k, spec.d);
    let n = grid.node_count();
    let axes = grid.axes();
    let coords = grid.coordinates();
    let point = |node: usize| {
        let c = &coords[node * (k + d)..(node + 1) * (k + d)];
        c.split_at(k)
    };
    let mut ubar = vec![0.0; k * n];
    let mut phi0 = vec![0.0; n];
    let mut buf = vec![0.0; k];
    for node in 0..n {
        let (x, y) = point(node);
        (stop.post_stop_cost)(x, y, &mut buf);
        for c in 0..k {
            ubar[c * n + node] = buf[c];
        }
        phi0[node] = (spec.major_initial)(x, y);
    }
    let mut a = vec![0.0; k];
    let mut b = vec![0.0; k];
    let mut u = vec![0.0; k];
    let mut p = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for node in 0..n {
        let (x, y) = point(node);
        for c in 0..k {
            u[c] = ubar[c * n + node];
        }
        for j in 0..d {
            p[j] = central_at(&phi0, node, &axes[k + j]);
        }
        let alpha = solve_alpha_star(spec, x, y, &u, &p, None, &cfg.fixed_point)?;
        (spec.crowd_drift)(x, y, &u, &alpha, &mut a);
        (spec.crowd_source)(x, y, &u, &alpha, &mut b);
        for c in 0..k {
            let uc = &ubar[c * n..(c + 1) * n];
            let mut r = spec.crowd_discount * uc[node] - b[c];
            for i in 0..k {
                r += a[i] * transport_at(uc, node, &axes[i], a[i]);
            }
            for j in 0..d {
                let ax = &axes[k + j];
                r += alpha[j] * transport_at(uc, node, ax, alpha[j]);
                r -= spec.noise * second_difference_at(uc, node, ax);
            }
            worst = worst.max(r.abs());
        }
    }
    let warning = (worst > threshold).then(|| {
        format!("post-stop crowd cost is not compatible with the crowd equation: residual {worst:e} > {threshold:e}")
    });
    Ok(CompatibilityReport {
        max_residual: worst,
        threshold,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_examples() {
        let r = complementarity_residual(&[0.5], &[1.0], &[0.0], 1e-9);
        assert_eq!(r.complementarity_residual[0], 0.0);
        assert!(!r.contact_set[0]);
        let r = complementarity_residual(&[1.0], &[1.0], &[-0.3], 1e-9);
        assert_eq!(r.complementarity_residual[0], 0.0);
        assert!(r.contact_set[0]);
        let r = complementarity_residual(&[1.2, 0.0], &[1.0, 0.0], &[0.0, 0.0], 1e-9);
        assert!(r.complementarity_residual[0] >= 0.2 - 1e-15);
        assert!(r.max_violation >= 0.2 - 1e-15);
    }
}
