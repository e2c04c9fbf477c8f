//! Time stepping of the coupled major/crowd system and of its myopic
//! reduction.
//!
//! The solver integrates forward from the `t = 0` data:
//!
//! ```text
//! ∂_t φ = -F(x, y, U, ∇_y φ, α*) - A·∇_x φ - ρ φ + ν Δ_y φ
//! ∂_t U = -(A·∇_x) U - α*·∇_y U - λ U + ν Δ_y U + B
//! α*    = ∂_p F(x, y, U, ∇_y φ, α*)
//! ```
//!
//! Each step is IMEX: the Hamiltonian and the transport terms are explicit
//! (first-order upwind in `x` and for the crowd `y`-transport, central
//! `∇_y φ` inside `F`), the discount and the diffusion are implicit through
//! one tridiagonal solve per `y`-line. Controls are recomputed from the new
//! fields at the end of the step. With several `y` dimensions the implicit
//! solve is split dimension by dimension.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fixedpoint::{
    beta_at, solve_alpha_star_into, ControlFields, FixedPointOptions, FixedPointOutcome, FixedPointScratch,
    NonConvergencePolicy,
};
use crate::grid::{
    central_at, line_residual, second_difference_at, solve_line, solve_line_obstacle, sup_norm, transport_at, AxisInfo,
    CrowdField, GridSpec, ScalarField,
};
use crate::model::{ModelSpec, StoppingSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub fixed_point: FixedPointOptions,
    /// Half-width of the band `|φ - ψ| ≤ tie_tol` on which `β* = 0`.
    pub tie_tol: f64,
    /// Emit a snapshot every this many steps (the first and last step are
    /// always emitted).
    pub snapshot_every: usize,
    /// Sup-norm threshold of the blow-up guard.
    pub blowup_bound: f64,
    /// Extra control/field sweeps per step (0: controls lag one step).
    pub inner_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            fixed_point: FixedPointOptions::default(),
            tie_tol: 1e-12,
            snapshot_every: 100,
            blowup_bound: 1e8,
            inner_sweeps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub step: usize,
    pub phi: ScalarField,
    pub u: CrowdField,
    pub controls: ControlFields,
    /// Discrete residual of the φ-equation, `(Mφ - r)/dt`, on obstacle runs.
    pub pde_residual: Option<Vec<f64>>,
}

/// Per-step record; entry 0 describes the initial state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunDiagnostics {
    pub times: Vec<f64>,
    pub sup_norm_phi: Vec<f64>,
    pub sup_norm_u: Vec<f64>,
    /// Largest control fixed-point residual over the grid.
    pub step_residuals: Vec<f64>,
    /// `dt` times the largest transport rate seen in the step.
    pub cfl_numbers: Vec<f64>,
    /// `sup (φ - ψ)⁺` (stopping runs only, zero otherwise).
    pub excess: Vec<f64>,
    pub blowup_tripped: bool,
    /// Last time reached with a valid state.
    pub effective_horizon: f64,
    pub fp_failures: usize,
    pub warnings: Vec<String>,
}

impl RunDiagnostics {
    fn push(&mut self, t: f64, sup_phi: f64, sup_u: f64, residual: f64, cfl: f64, excess: f64) {
        self.times.push(t);
        self.sup_norm_phi.push(sup_phi);
        self.sup_norm_u.push(sup_u);
        self.step_residuals.push(residual);
        self.cfl_numbers.push(cfl);
        self.excess.push(excess);
        self.effective_horizon = t;
    }

    pub fn max_fp_residual(&self) -> f64 {
        self.step_residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// A finished run: emitted snapshots and the per-step diagnostics.
#[derive(Clone, Debug)]
pub struct Run {
    pub snapshots: Vec<SystemState>,
    pub diagnostics: RunDiagnostics,
}

impl Run {
    pub fn final_state(&self) -> &SystemState {
        self.snapshots.last().expect("a run always holds the initial snapshot")
    }
}

/// Which system a run integrates.
#[derive(Clone, Copy, Debug)]
pub enum Problem<'a> {
    /// The full coupled system.
    System,
    /// The crowd is short-sighted: `U ≡ 0`, only φ evolves.
    Myopic,
    /// Stopping with bounded intensity `β* ≤ 1/ε`.
    Penalized(&'a StoppingSpec),
    /// Stopping in the limit `ε → 0` (projected implicit step).
    Obstacle(&'a StoppingSpec),
}

/// Stopping data sampled on the grid.
#[derive(Clone, Debug)]
pub(crate) struct StopField {
    pub psi: Vec<f64>,
    /// Component-major like [`CrowdField`].
    pub ubar: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub(crate) enum Mode {
    System,
    Myopic,
    Penalized(StopField),
    Obstacle(StopField),
}

/// Tolerance of the control solves behind the Lax-Friedrichs speed.
const LF_TOL: f64 = 1e-9;
const LF_MAX_ITER: usize = 30;
/// Smallest costate jump (relative) for which the secant slope is trusted.
const LF_SECANT_MIN: f64 = 1e-4;

struct NodeScratch {
    u: Vec<f64>,
    p: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    g: Vec<f64>,
    shifted: Vec<f64>,
    fd: Vec<f64>,
    q: Vec<f64>,
    a_shifted: Vec<f64>,
    alpha_shifted: Vec<f64>,
    fp: FixedPointScratch,
}

impl NodeScratch {
    fn new(k: usize, d: usize) -> Self {
        NodeScratch {
            u: vec![0.0; k],
            p: vec![0.0; d],
            a: vec![0.0; k],
            b: vec![0.0; k],
            g: vec![0.0; d],
            shifted: vec![0.0; d],
            fd: vec![0.0; d],
            q: vec![0.0; k],
            a_shifted: vec![0.0; k],
            alpha_shifted: vec![0.0; d],
            fp: FixedPointScratch::new(d),
        }
    }
}

/// Fields produced by one pass of the scheme before the controls are
/// refreshed.
struct Advanced {
    phi: Vec<f64>,
    u: Vec<f64>,
    beta: Vec<f64>,
    pde_residual: Option<Vec<f64>>,
    cfl: f64,
}

/// A configured integrator on one grid.
pub struct Solver<'a> {
    spec: &'a ModelSpec,
    grid: &'a GridSpec,
    cfg: &'a SolverConfig,
    mode: Mode,
    axes: Vec<AxisInfo>,
    coords: Vec<f64>,
    nodes: usize,
}

impl<'a> Solver<'a> {
    pub fn new(spec: &'a ModelSpec, grid: &'a GridSpec, cfg: &'a SolverConfig, problem: Problem<'_>) -> Result<Self> {
        grid.validate()?;
        if spec.k != grid.k() || spec.d != grid.d() {
            return Err(Error::validation(
                "grid",
                format!(
                    "model dimensions (k = {}, d = {}) do not match the grid ({}, {})",
                    spec.k,
                    spec.d,
                    grid.k(),
                    grid.d()
                ),
            ));
        }
        if !(cfg.fixed_point.theta > 0.0 && cfg.fixed_point.theta <= 1.0) {
            return Err(Error::validation("theta", "damping must lie in (0, 1]"));
        }
        let coords = grid.coordinates();
        let nodes = grid.node_count();
        let mut solver = Solver {
            spec,
            grid,
            cfg,
            mode: Mode::System,
            axes: grid.axes(),
            coords,
            nodes,
        };
        solver.mode = match problem {
            Problem::System => Mode::System,
            Problem::Myopic => Mode::Myopic,
            Problem::Penalized(stop) => Mode::Penalized(solver.sample_stopping(stop)?),
            Problem::Obstacle(stop) => Mode::Obstacle(solver.sample_stopping(stop)?),
        };
        Ok(solver)
    }

    pub fn grid(&self) -> &GridSpec {
        self.grid
    }

    fn dims(&self) -> usize {
        self.spec.k + self.spec.d
    }

    fn point(&self, node: usize) -> (&[f64], &[f64]) {
        let dims = self.dims();
        let c = &self.coords[node * dims..(node + 1) * dims];
        c.split_at(self.spec.k)
    }

    fn sample_stopping(&self, stop: &StoppingSpec) -> Result<StopField> {
        if !(stop.epsilon > 0.0) {
            return Err(Error::validation("epsilon", "epsilon must be positive"));
        }
        let (k, n) = (self.spec.k, self.nodes);
        let mut psi = vec![0.0; n];
        let mut ubar = vec![0.0; k * n];
        let mut buf = vec![0.0; k];
        for node in 0..n {
            let (x, y) = self.point(node);
            psi[node] = (stop.stopping_cost)(x, y);
            if !psi[node].is_finite() {
                return Err(Error::evaluation("psi", x, y));
            }
            (stop.post_stop_cost)(x, y, &mut buf);
            for c in 0..k {
                if !buf[c].is_finite() {
                    return Err(Error::evaluation("Ubar", x, y));
                }
                ubar[c * n + node] = buf[c];
            }
        }
        Ok(StopField {
            psi,
            ubar,
            epsilon: stop.epsilon,
        })
    }

    /// The stopping cost `ψ` sampled on the grid (stopping problems only).
    pub fn psi(&self) -> Option<&[f64]> {
        self.stop_field().map(|s| s.psi.as_slice())
    }

    pub(crate) fn stop_field(&self) -> Option<&StopField> {
        match &self.mode {
            Mode::Penalized(s) | Mode::Obstacle(s) => Some(s),
            _ => None,
        }
    }

    fn myopic(&self) -> bool {
        matches!(self.mode, Mode::Myopic)
    }

    /// Initial data with controls solved from `φ₀`; on stopping problems `β*`
    /// is read off `φ₀` as well.
    pub fn initial_state(&self) -> Result<SystemState> {
        let (k, d, n) = (self.spec.k, self.spec.d, self.nodes);
        let mut phi = vec![0.0; n];
        let mut u = vec![0.0; k * n];
        let mut buf = vec![0.0; k];
        for node in 0..n {
            let (x, y) = self.point(node);
            phi[node] = (self.spec.major_initial)(x, y);
            if !phi[node].is_finite() {
                return Err(Error::evaluation("phi0", x, y));
            }
            if !self.myopic() {
                (self.spec.crowd_initial)(x, y, &mut buf);
                for c in 0..k {
                    if !buf[c].is_finite() {
                        return Err(Error::evaluation("U0", x, y));
                    }
                    u[c * n + node] = buf[c];
                }
            }
        }
        let mut alpha = vec![0.0; d * n];
        self.solve_controls(&phi, &u, &mut alpha)?;
        let beta = match &self.mode {
            Mode::Penalized(stop) => phi
                .iter()
                .zip(&stop.psi)
                .map(|(f, s)| beta_at(*f, *s, stop.epsilon, self.cfg.tie_tol))
                .collect(),
            Mode::Obstacle(stop) => phi
                .iter()
                .zip(&stop.psi)
                .map(|(f, s)| if f == s { f64::INFINITY } else { 0.0 })
                .collect(),
            Mode::System | Mode::Myopic => vec![0.0; n],
        };
        Ok(SystemState {
            t: 0.0,
            step: 0,
            phi: ScalarField { values: phi },
            u: CrowdField { k, values: u },
            controls: ControlFields { d, alpha, beta },
            pde_residual: None,
        })
    }

    /// Solve `α* = ∂_pF` at every node, warm-started from `alpha`.
    /// Returns the largest residual and the number of tolerated failures.
    fn solve_controls(&self, phi: &[f64], u: &[f64], alpha: &mut [f64]) -> Result<(f64, usize)> {
        let (k, d, n) = (self.spec.k, self.spec.d, self.nodes);
        let myopic = self.myopic();
        let opts = &self.cfg.fixed_point;
        let outcomes: Vec<Result<FixedPointOutcome>> = alpha
            .par_chunks_mut(d)
            .enumerate()
            .map_init(
                || NodeScratch::new(k, d),
                |sc, (node, a)| {
                    let (x, y) = self.point(node);
                    for c in 0..k {
                        sc.u[c] = if myopic { 0.0 } else { u[c * n + node] };
                    }
                    for j in 0..d {
                        sc.p[j] = central_at(phi, node, &self.axes[k + j]);
                    }
                    solve_alpha_star_into(self.spec, x, y, &sc.u, &sc.p, a, opts, &mut sc.fp)
                },
            )
            .collect();
        let mut worst: f64 = 0.0;
        let mut failures = 0;
        for (node, outcome) in outcomes.into_iter().enumerate() {
            let outcome = outcome?;
            if outcome.converged {
                worst = worst.max(outcome.residual);
            } else if opts.policy == NonConvergencePolicy::Warn {
                worst = worst.max(outcome.residual);
                failures += 1;
            } else {
                return Err(Error::NonConvergence {
                    node,
                    iterations: outcome.iterations,
                    residual: outcome.residual,
                });
            }
        }
        Ok((worst, failures))
    }

    /// Lax-Friedrichs speed along `y_j` for the effective Hamiltonian
    /// `H(p) = F(p, α*(p)) + A(α*(p))·∇_xφ`: the larger of `|∂_{p_j}F|` at the
    /// backward and forward differences of φ (mirror ghosts at the boundary)
    /// and the secant slope of `H` between them. `α*` at the one-sided
    /// costates comes from [`Solver::loose_alpha`]; the speed only scales the
    /// dissipation. Expects `sc.u`, `sc.p` and `sc.q`
    /// filled for `node`.
    fn lf_speed(
        &self,
        node: usize,
        phi: &[f64],
        x: &[f64],
        y: &[f64],
        alpha: &[f64],
        j: usize,
        sc: &mut NodeScratch,
    ) -> Result<f64> {
        let ax = &self.axes[self.spec.k + j];
        let pos = ax.position(node);
        let here = phi[node];
        let next = if pos + 1 < ax.len { phi[node + ax.stride] } else { phi[node - ax.stride] };
        let prev = if pos > 0 { phi[node - ax.stride] } else { phi[node + ax.stride] };
        let one_sided = [(here - prev) / ax.spacing, (next - here) / ax.spacing];
        let mut speed: f64 = 0.0;
        let mut h = [0.0; 2];
        for (side, &pj) in one_sided.iter().enumerate() {
            sc.shifted.copy_from_slice(&sc.p);
            sc.shifted[j] = pj;
            sc.alpha_shifted.copy_from_slice(alpha);
            self.loose_alpha(x, y, &sc.u, &sc.shifted, &mut sc.alpha_shifted, &mut sc.g, &mut sc.fd)?;
            speed = speed.max(sc.g[j].abs());
            (self.spec.crowd_drift)(x, y, &sc.u, &sc.alpha_shifted, &mut sc.a_shifted);
            h[side] = (self.spec.hamiltonian)(x, y, &sc.u, &sc.shifted, &sc.alpha_shifted)
                + sc.a_shifted.iter().zip(&sc.q).map(|(a, q)| a * q).sum::<f64>();
        }
        let dp = one_sided[1] - one_sided[0];
        if dp.abs() > LF_SECANT_MIN * (1.0 + sc.p[j].abs()) {
            let secant = ((h[1] - h[0]) / dp).abs();
            if secant.is_finite() {
                speed = speed.max(secant);
            }
        }
        Ok(speed)
    }

    /// Cheap solve of `α = ∂_pF(α)` for the Lax-Friedrichs speed, starting
    /// from `alpha`: secant iteration on the residual when `d = 1`, plain
    /// Picard otherwise. Leaves `∂_pF` at the returned `α` in `g`.
    #[allow(clippy::too_many_arguments)]
    fn loose_alpha(
        &self,
        x: &[f64],
        y: &[f64],
        u: &[f64],
        p: &[f64],
        alpha: &mut [f64],
        g: &mut [f64],
        fd: &mut [f64],
    ) -> Result<()> {
        self.spec.eval_grad_p(x, y, u, p, alpha, g, fd)?;
        if alpha.len() == 1 {
            let (mut a0, mut r0) = (alpha[0], alpha[0] - g[0]);
            let mut a1 = g[0];
            for _ in 0..LF_MAX_ITER {
                alpha[0] = a1;
                self.spec.eval_grad_p(x, y, u, p, alpha, g, fd)?;
                let r1 = a1 - g[0];
                if r1.abs() <= LF_TOL * (1.0 + a1.abs()) || r1 == r0 {
                    break;
                }
                let next = a1 - r1 * (a1 - a0) / (r1 - r0);
                if !next.is_finite() {
                    break;
                }
                (a0, r0, a1) = (a1, r1, next);
            }
            return Ok(());
        }
        for _ in 0..LF_MAX_ITER {
            let change = alpha.iter().zip(g.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            alpha.copy_from_slice(g);
            self.spec.eval_grad_p(x, y, u, p, alpha, g, fd)?;
            if change <= LF_TOL {
                break;
            }
        }
        Ok(())
    }

    /// Explicit update of one node; writes `[φ*, U*_1..U*_k]` and returns the
    /// transport rate `Σ|A_i|/h_i + Σ max(a_j, |α_j|)/h_j`, where `a_j` is
    /// the Lax-Friedrichs speed.
    fn explicit_node(
        &self,
        node: usize,
        phi: &[f64],
        u: &[f64],
        alpha: &[f64],
        dt: f64,
        sc: &mut NodeScratch,
        out: &mut [f64],
    ) -> Result<f64> {
        let (k, d, n) = (self.spec.k, self.spec.d, self.nodes);
        let myopic = self.myopic();
        let (x, y) = self.point(node);
        for c in 0..k {
            sc.u[c] = if myopic { 0.0 } else { u[c * n + node] };
        }
        for j in 0..d {
            sc.p[j] = central_at(phi, node, &self.axes[k + j]);
        }
        let al = &alpha[node * d..(node + 1) * d];
        let f = (self.spec.hamiltonian)(x, y, &sc.u, &sc.p, al);
        if !f.is_finite() {
            return Err(Error::evaluation("F", x, y));
        }
        (self.spec.crowd_drift)(x, y, &sc.u, al, &mut sc.a);
        if !sc.a.iter().all(|v| v.is_finite()) {
            return Err(Error::evaluation("A", x, y));
        }
        let mut rate = 0.0;
        let mut transport = 0.0;
        for i in 0..k {
            let ai = sc.a[i];
            sc.q[i] = transport_at(phi, node, &self.axes[i], ai);
            transport += ai * sc.q[i];
            rate += ai.abs() / self.axes[i].spacing;
        }
        // local Lax-Friedrichs dissipation keeps the Hamiltonian stage monotone
        let mut dissipation = 0.0;
        for j in 0..d {
            let ax = &self.axes[k + j];
            let speed = self.lf_speed(node, phi, x, y, al, j, sc)?;
            dissipation += 0.5 * speed * ax.spacing * second_difference_at(phi, node, ax);
            rate += speed.max(al[j].abs()) / ax.spacing;
        }
        out[0] = phi[node] - dt * (f + transport - dissipation);
        if myopic {
            out[1..].fill(0.0);
            return Ok(rate);
        }
        (self.spec.crowd_source)(x, y, &sc.u, al, &mut sc.b);
        if !sc.b.iter().all(|v| v.is_finite()) {
            return Err(Error::evaluation("B", x, y));
        }
        for c in 0..k {
            let uc = &u[c * n..(c + 1) * n];
            let mut tr = 0.0;
            for i in 0..k {
                tr += sc.a[i] * transport_at(uc, node, &self.axes[i], sc.a[i]);
            }
            for j in 0..d {
                tr += al[j] * transport_at(uc, node, &self.axes[k + j], al[j]);
            }
            out[1 + c] = uc[node] - dt * (tr - sc.b[c]);
        }
        Ok(rate)
    }

    /// Implicit `(σ - dt ν Δ_y)` solve in place, one `y` dimension at a time.
    /// With an obstacle, the last dimension is solved as a complementarity
    /// problem and the row residuals divided by `dt` are written to
    /// `residual`.
    fn implicit_y(&self, values: &mut [f64], sigma: f64, dt: f64, obstacle: Option<(&[f64], &mut [f64])>) {
        let (k, d) = (self.spec.k, self.spec.d);
        let nu = self.spec.noise;
        let mut obstacle = obstacle;
        for j in 0..d {
            let ax = self.axes[k + j];
            let kappa = dt * nu / (ax.spacing * ax.spacing);
            let s = if j == 0 { sigma } else { 1.0 };
            let block = ax.len * ax.stride;
            let last = j + 1 == d;
            match (&mut obstacle, last) {
                (Some((psi, residual)), true) => {
                    values
                        .par_chunks_mut(block)
                        .zip(psi.par_chunks(block))
                        .zip(residual.par_chunks_mut(block))
                        .for_each_init(
                            || LineScratch::new(ax.len),
                            |sc, ((vals, ps), res)| {
                                for o in 0..ax.stride {
                                    sc.gather(vals, o, ax.stride);
                                    for m in 0..ax.len {
                                        sc.obstacle[m] = ps[o + m * ax.stride];
                                    }
                                    solve_line_obstacle(&sc.rhs, &sc.obstacle, kappa, s, &mut sc.out, &mut sc.work);
                                    for m in 0..ax.len {
                                        vals[o + m * ax.stride] = sc.out[m];
                                        res[o + m * ax.stride] = line_residual(&sc.out, &sc.rhs, kappa, s, m) / dt;
                                    }
                                }
                            },
                        );
                }
                _ => {
                    values.par_chunks_mut(block).for_each_init(
                        || LineScratch::new(ax.len),
                        |sc, vals| {
                            for o in 0..ax.stride {
                                sc.gather(vals, o, ax.stride);
                                solve_line(&sc.rhs, kappa, s, &mut sc.out, &mut sc.work);
                                for m in 0..ax.len {
                                    vals[o + m * ax.stride] = sc.out[m];
                                }
                            }
                        },
                    );
                }
            }
        }
    }

    /// One pass of the scheme from `state` using the controls `alpha`.
    fn advance(&self, state: &SystemState, alpha: &[f64], dt: f64) -> Result<Advanced> {
        let (k, n) = (self.spec.k, self.nodes);
        let d = self.spec.d;
        let phi = &state.phi.values;
        let u = &state.u.values;
        let width = 1 + k;
        let mut packed = vec![0.0; width * n];
        let rates: Vec<f64> = packed
            .par_chunks_mut(width)
            .enumerate()
            .map_init(
                || NodeScratch::new(k, d),
                |sc, (node, out)| self.explicit_node(node, phi, u, alpha, dt, sc, out).unwrap_or(f64::NAN),
            )
            .collect();
        let mut max_rate: f64 = 0.0;
        for (node, r) in rates.iter().enumerate() {
            if r.is_nan() {
                // re-run sequentially to recover the error
                let mut sc = NodeScratch::new(k, d);
                let mut out = vec![0.0; width];
                self.explicit_node(node, phi, u, alpha, dt, &mut sc, &mut out)?;
            }
            max_rate = max_rate.max(*r);
        }
        let cfl = dt * max_rate;
        if cfl > 1.0 + 1e-12 {
            return Err(Error::Cfl {
                dt,
                dt_max: 1.0 / max_rate,
            });
        }

        let mut phi_new = vec![0.0; n];
        let mut u_new = vec![0.0; k * n];
        for node in 0..n {
            phi_new[node] = packed[node * width];
            for c in 0..k {
                u_new[c * n + node] = packed[node * width + 1 + c];
            }
        }

        let mut beta = vec![0.0; n];
        let mut pde_residual = None;
        let sigma_phi = 1.0 + dt * self.spec.major_discount;
        match &self.mode {
            Mode::Obstacle(stop) => {
                let mut res = vec![0.0; n];
                self.implicit_y(&mut phi_new, sigma_phi, dt, Some((&stop.psi, &mut res)));
                pde_residual = Some(res);
            }
            _ => self.implicit_y(&mut phi_new, sigma_phi, dt, None),
        }
        if !self.myopic() {
            let sigma_u = 1.0 + dt * self.spec.crowd_discount;
            for c in 0..k {
                self.implicit_y(&mut u_new[c * n..(c + 1) * n], sigma_u, dt, None);
            }
        }

        match &self.mode {
            Mode::Penalized(stop) => {
                let tie = self.cfg.tie_tol;
                for node in 0..n {
                    let b = beta_at(phi_new[node], stop.psi[node], stop.epsilon, tie);
                    beta[node] = b;
                    if b > 0.0 {
                        let w = dt * b;
                        phi_new[node] = (phi_new[node] + w * stop.psi[node]) / (1.0 + w);
                        for c in 0..k {
                            let i = c * n + node;
                            u_new[i] = (u_new[i] + w * stop.ubar[i]) / (1.0 + w);
                        }
                    }
                }
            }
            Mode::Obstacle(stop) => {
                for node in 0..n {
                    if phi_new[node] == stop.psi[node] {
                        beta[node] = f64::INFINITY;
                        for c in 0..k {
                            let i = c * n + node;
                            u_new[i] = stop.ubar[i];
                        }
                    }
                }
            }
            Mode::System | Mode::Myopic => {}
        }

        Ok(Advanced {
            phi: phi_new,
            u: u_new,
            beta,
            pde_residual,
            cfl,
        })
    }

    /// Advance `state` by `dt`. Returns the new state, its largest fixed-point
    /// residual, the number of tolerated fixed-point failures and the CFL
    /// number of the step.
    pub fn step(&self, state: &SystemState, dt: f64) -> Result<(SystemState, f64, usize, f64)> {
        let mut alpha_use = state.controls.alpha.clone();
        for sweep in 0..=self.cfg.inner_sweeps {
            let adv = self.advance(state, &alpha_use, dt)?;
            let t = state.t + dt;
            let sup = sup_norm(&adv.phi).max(sup_norm(&adv.u));
            if !(sup <= self.cfg.blowup_bound) {
                return Err(Error::BlowUp { t, sup_norm: sup });
            }
            let mut alpha = alpha_use.clone();
            let (residual, failures) = self.solve_controls(&adv.phi, &adv.u, &mut alpha)?;
            if sweep == self.cfg.inner_sweeps {
                let next = SystemState {
                    t,
                    step: state.step + 1,
                    phi: ScalarField { values: adv.phi },
                    u: CrowdField { k: self.spec.k, values: adv.u },
                    controls: ControlFields {
                        d: self.spec.d,
                        alpha,
                        beta: adv.beta,
                    },
                    pde_residual: adv.pde_residual,
                };
                return Ok((next, residual, failures, adv.cfl));
            }
            alpha_use = alpha;
        }
        unreachable!("the sweep loop always returns")
    }

    /// Largest admissible `dt` at `state`: the inverse of the largest
    /// per-node transport rate, capped at the horizon.
    pub fn cfl_certificate(&self, state: &SystemState) -> Result<f64> {
        let (k, d) = (self.spec.k, self.spec.d);
        let width = 1 + k;
        let mut sc = NodeScratch::new(k, d);
        let mut out = vec![0.0; width];
        let mut max_rate: f64 = 0.0;
        for node in 0..self.nodes {
            let r = self.explicit_node(
                node,
                &state.phi.values,
                &state.u.values,
                &state.controls.alpha,
                0.0,
                &mut sc,
                &mut out,
            )?;
            max_rate = max_rate.max(r);
        }
        Ok(if max_rate > 0.0 {
            (1.0 / max_rate).min(self.grid.horizon)
        } else {
            self.grid.horizon
        })
    }

    fn excess(&self, phi: &[f64]) -> f64 {
        match self.stop_field() {
            Some(stop) => phi.iter().zip(&stop.psi).map(|(f, s)| (f - s).max(0.0)).fold(0.0, f64::max),
            None => 0.0,
        }
    }

    /// Integrate from `t = 0` to the horizon. `observer` sees the initial
    /// state, every `snapshot_every`-th state and the final state. A tripped
    /// blow-up guard freezes the run at the last valid state.
    pub fn run(&self, observer: &mut dyn FnMut(&SystemState)) -> Result<RunDiagnostics> {
        let mut diag = RunDiagnostics::default();
        self.run_into(observer, &mut diag)?;
        Ok(diag)
    }

    /// [`Solver::run`] recording into `diag`, which keeps every step taken
    /// before an error.
    pub fn run_into(&self, observer: &mut dyn FnMut(&SystemState), diag: &mut RunDiagnostics) -> Result<()> {
        let mut state = self.initial_state()?;
        let dt_max = self.cfl_certificate(&state)?;
        if self.grid.dt > dt_max * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: self.grid.dt,
                dt_max,
            });
        }
        let initial_residual = self.initial_residual(&state)?;
        diag.push(
            0.0,
            state.phi.sup_norm(),
            state.u.sup_norm(),
            initial_residual,
            self.grid.dt / dt_max,
            self.excess(&state.phi.values),
        );
        observer(&state);
        let steps = self.grid.step_count();
        let every = self.cfg.snapshot_every.max(1);
        for step in 1..=steps {
            let dt = self.grid.time_at(step) - state.t;
            match self.step(&state, dt) {
                Ok((mut next, residual, failures, cfl)) => {
                    next.t = self.grid.time_at(step);
                    diag.fp_failures += failures;
                    diag.push(
                        next.t,
                        next.phi.sup_norm(),
                        next.u.sup_norm(),
                        residual,
                        cfl,
                        self.excess(&next.phi.values),
                    );
                    state = next;
                    if step % every == 0 || step == steps {
                        observer(&state);
                    }
                }
                Err(Error::BlowUp { t, sup_norm }) => {
                    diag.blowup_tripped = true;
                    diag.warnings.push(format!(
                        "blow-up guard tripped at t = {t} (sup norm {sup_norm:e}); run frozen at t = {}",
                        state.t
                    ));
                    if state.step % every != 0 {
                        observer(&state);
                    }
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diag.fp_failures > 0 {
            diag.warnings
                .push(format!("{} control fixed-point solves hit max_iter", diag.fp_failures));
        }
        Ok(())
    }

    pub(crate) fn initial_residual(&self, state: &SystemState) -> Result<f64> {
        let mut alpha = state.controls.alpha.clone();
        let (residual, _) = self.solve_controls(&state.phi.values, &state.u.values, &mut alpha)?;
        Ok(residual)
    }

    /// Run and keep every emitted snapshot.
    pub fn run_collect(&self) -> Result<Run> {
        let mut snapshots = Vec::new();
        let diagnostics = self.run(&mut |s| snapshots.push(s.clone()))?;
        Ok(Run { snapshots, diagnostics })
    }
}

struct LineScratch {
    rhs: Vec<f64>,
    out: Vec<f64>,
    work: Vec<f64>,
    obstacle: Vec<f64>,
}

impl LineScratch {
    fn new(len: usize) -> Self {
        LineScratch {
            rhs: vec![0.0; len],
            out: vec![0.0; len],
            work: vec![0.0; len],
            obstacle: vec![0.0; len],
        }
    }

    fn gather(&mut self, block: &[f64], offset: usize, stride: usize) {
        for (m, r) in self.rhs.iter_mut().enumerate() {
            *r = block[offset + m * stride];
        }
    }
}

/// Advance the coupled system by one step of `grid.dt`.
pub fn step_system(state: &SystemState, spec: &ModelSpec, grid: &GridSpec, cfg: &SolverConfig) -> Result<SystemState> {
    let solver = Solver::new(spec, grid, cfg, Problem::System)?;
    let (mut next, ..) = solver.step(state, grid.dt)?;
    next.t = state.t + grid.dt;
    Ok(next)
}

/// Integrate the coupled system from `t = 0` to the horizon.
pub fn solve_system(spec: &ModelSpec, grid: &GridSpec, cfg: &SolverConfig) -> Result<Run> {
    Solver::new(spec, grid, cfg, Problem::System)?.run_collect()
}

/// Integrate the myopic reduction: U frozen at zero.
pub fn solve_myopic(spec: &ModelSpec, grid: &GridSpec, cfg: &SolverConfig) -> Result<Run> {
    Solver::new(spec, grid, cfg, Problem::Myopic)?.run_collect()
}

/// Write the per-step diagnostics as CSV.
pub fn write_diagnostics_csv<W: std::io::Write>(diag: &RunDiagnostics, mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,sup_phi,sup_u,fp_residual_max,cfl,excess")?;
    for i in 0..diag.times.len() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            diag.times[i],
            diag.sup_norm_phi[i],
            diag.sup_norm_u[i],
            diag.step_residuals[i],
            diag.cfl_numbers[i],
            diag.excess[i]
        )?;
    }
    Ok(())
}

/// Write one snapshot as CSV: a `#` header line with the grid description
/// and time stamp, a column header, then one row per node.
pub fn write_snapshot_csv<W: std::io::Write>(grid: &GridSpec, state: &SystemState, mut w: W) -> std::io::Result<()> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let joinu = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let k = grid.k();
    let d = grid.d();
    writeln!(
        w,
        "# k={} d={} n_x={} n_y={} x_min={} x_max={} y_min={} y_max={} t={} step={}",
        k,
        d,
        joinu(&grid.n_x),
        joinu(&grid.n_y),
        join(&grid.x_min),
        join(&grid.x_max),
        join(&grid.y_min),
        join(&grid.y_max),
        state.t,
        state.step
    )?;
    let mut header = vec!["node".to_string()];
    header.extend((1..=k).map(|i| format!("x{i}")));
    header.extend((1..=d).map(|j| format!("y{j}")));
    header.push("phi".into());
    header.extend((1..=k).map(|i| format!("u{i}")));
    header.extend((1..=d).map(|j| format!("alpha{j}")));
    header.push("beta".into());
    writeln!(w, "{}", header.join(","))?;
    let coords = grid.coordinates();
    let n = grid.node_count();
    for node in 0..n {
        let mut row = vec![node.to_string()];
        row.extend(coords[node * (k + d)..(node + 1) * (k + d)].iter().map(|c| c.to_string()));
        row.push(state.phi.values[node].to_string());
        row.extend((0..k).map(|c| state.u.values[c * n + node].to_string()));
        row.extend(state.controls.alpha_at(node).iter().map(|a| a.to_string()));
        row.push(state.controls.beta[node].to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
