//! Independent checks of the solvers: a particle simulation of the crowd
//! histogram, the characteristic ODE of the transport field, a derivative
//! check for `∂_p F` and closed-form scalar reductions.
//!
//! The particle oracle reads the crowd drift as a rate-matrix coupling
//! `A = Qᵀx`: each small player jumps from state `i` to `j` at rate `Q_ij`,
//! and the mean of the empirical histogram solves `ẋ = Qᵀx`. Controls are
//! frozen, so the oracle validates transport only.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evolution::{Problem, Solver, SolverConfig};
use crate::grid::GridSpec;
use crate::model::{CouplingFn, ModelSpec, StoppingSpec};

/// `Q(x, y, U, α)` written row-major into a `k × k` slice.
pub type RateFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Largest `k` handled without a heap buffer.
const STACK_K: usize = 4;

#[derive(Clone)]
pub struct RateMatrixCoupling {
    pub k: usize,
    pub rates: RateFn,
}

impl std::fmt::Debug for RateMatrixCoupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateMatrixCoupling").field("k", &self.k).finish_non_exhaustive()
    }
}

impl RateMatrixCoupling {
    /// Constant rate matrix.
    pub fn constant(q: Vec<f64>) -> Result<Self> {
        let k = (q.len() as f64).sqrt().round() as usize;
        if k * k != q.len() || k == 0 {
            return Err(Error::validation("Q", "rate matrix must be square"));
        }
        let rc = RateMatrixCoupling {
            k,
            rates: Arc::new(move |_x, _y, _u, _a, out: &mut [f64]| out.copy_from_slice(&q)),
        };
        Ok(rc)
    }

    /// Two states exchanging at the same rate in both directions.
    pub fn symmetric_pair(rate: f64) -> Self {
        RateMatrixCoupling::constant(vec![-rate, rate, rate, -rate]).expect("2x2 is square")
    }

    pub fn matrix(&self, x: &[f64], y: &[f64], u: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        let mut q = vec![0.0; self.k * self.k];
        (self.rates)(x, y, u, alpha, &mut q);
        validate_rates(&q, self.k)?;
        Ok(q)
    }

    /// The induced drift `A = Qᵀx`.
    pub fn coupling(&self) -> CouplingFn {
        let k = self.k;
        let rates = self.rates.clone();
        Arc::new(move |x, y, u, alpha, out: &mut [f64]| {
            let mut stack = [0.0; STACK_K * STACK_K];
            let mut heap;
            let q: &mut [f64] = if k <= STACK_K {
                &mut stack[..k * k]
            } else {
                heap = vec![0.0; k * k];
                &mut heap
            };
            rates(x, y, u, alpha, q);
            crate::builtin::transpose_apply(q, x, out);
        })
    }
}

fn validate_rates(q: &[f64], k: usize) -> Result<()> {
    for i in 0..k {
        let row = &q[i * k..(i + 1) * k];
        let mut sum = 0.0;
        let mut scale: f64 = 0.0;
        for (j, &r) in row.iter().enumerate() {
            if !r.is_finite() {
                return Err(Error::validation("Q", format!("non-finite rate in row {i}")));
            }
            if i != j && r < 0.0 {
                return Err(Error::validation("Q", format!("negative off-diagonal rate Q[{i}][{j}] = {r}")));
            }
            sum += r;
            scale = scale.max(r.abs());
        }
        if sum.abs() > 1e-12 * (1.0 + scale) {
            return Err(Error::validation("Q", format!("row {i} sums to {sum}, not 0")));
        }
    }
    Ok(())
}

/// Empirical histogram trajectory of a particle run.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleTrajectory {
    pub times: Vec<f64>,
    /// Histogram per snapshot time, scaled by `Σx₀ / N`.
    pub histograms: Vec<Vec<f64>>,
    /// Standard error of each histogram entry.
    pub std_errors: Vec<Vec<f64>>,
    pub particles: usize,
    pub seed: u64,
}

const CHUNK: usize = 4096;

/// Simulate `n` independent continuous-time jump processes with rates `Q`
/// evaluated once at `(x0, y, u, alpha)`. Starting states are drawn from
/// `x0 / Σx0`. Each chunk of particles uses its own ChaCha stream, so the
/// result does not depend on the worker count.
pub fn particle_simulate(
    rc: &RateMatrixCoupling,
    x0: &[f64],
    y: &[f64],
    u: &[f64],
    alpha: &[f64],
    n: usize,
    times: &[f64],
    seed: u64,
) -> Result<ParticleTrajectory> {
    let k = rc.k;
    if x0.len() != k {
        return Err(Error::validation("x0", format!("expected {k} components")));
    }
    if x0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::validation("x0", "histogram must be finite and nonnegative"));
    }
    let mass: f64 = x0.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::validation("x0", "histogram must have positive mass"));
    }
    if n == 0 {
        return Err(Error::validation("N", "particle count must be positive"));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::validation("times", "snapshot times must be nonnegative and sorted"));
    }
    let q = rc.matrix(x0, y, u, alpha)?;
    let cumulative: Vec<f64> = x0
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v / mass;
            Some(*acc)
        })
        .collect();

    let chunks = n.div_ceil(CHUNK);
    let counts: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let size = CHUNK.min(n - c * CHUNK);
            let mut local = vec![0u64; times.len() * k];
            for _ in 0..size {
                let draw: f64 = rng.gen();
                let mut state = cumulative.iter().position(|&c| draw < c).unwrap_or(k - 1);
                let mut t = 0.0;
                for (s, &ts) in times.iter().enumerate() {
                    loop {
                        let exit = -q[state * k + state];
                        if exit <= 0.0 {
                            break;
                        }
                        let wait: f64 = Exp1.sample(&mut rng);
                        let next_t = t + wait / exit;
                        if next_t > ts {
                            // memoryless: restart the clock at the snapshot
                            t = ts;
                            break;
                        }
                        t = next_t;
                        let pick = rng.gen::<f64>() * exit;
                        let mut acc = 0.0;
                        let mut target = state;
                        for j in 0..k {
                            if j == state {
                                continue;
                            }
                            acc += q[state * k + j];
                            target = j;
                            if pick < acc {
                                break;
                            }
                        }
                        state = target;
                    }
                    local[s * k + state] += 1;
                }
            }
            local
        })
        .collect();

    let mut total = vec![0u64; times.len() * k];
    for local in &counts {
        for (t, l) in total.iter_mut().zip(local) {
            *t += l;
        }
    }
    let nf = n as f64;
    let mut histograms = Vec::with_capacity(times.len());
    let mut std_errors = Vec::with_capacity(times.len());
    for s in 0..times.len() {
        let frac: Vec<f64> = total[s * k..(s + 1) * k].iter().map(|&c| c as f64 / nf).collect();
        histograms.push(frac.iter().map(|f| f * mass).collect());
        std_errors.push(frac.iter().map(|f| mass * (f * (1.0 - f) / nf).sqrt()).collect());
    }
    Ok(ParticleTrajectory {
        times: times.to_vec(),
        histograms,
        std_errors,
        particles: n,
        seed,
    })
}

/// Integrate the characteristic `ẋ = A(x, y, U, α)` of the transport field
/// with frozen `y`, `U`, `α` by classical RK4 and return `x` at each of
/// `times`.
pub fn characteristic_ode(
    drift: &CouplingFn,
    x0: &[f64],
    y: &[f64],
    u: &[f64],
    alpha: &[f64],
    times: &[f64],
    dt: f64,
) -> Vec<Vec<f64>> {
    let k = x0.len();
    let f = |x: &[f64], out: &mut [f64]| drift(x, y, u, alpha, out);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let h = dt.min(target - t);
            f(&x, &mut k1);
            for i in 0..k {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            f(&tmp, &mut k2);
            for i in 0..k {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            f(&tmp, &mut k3);
            for i in 0..k {
                tmp[i] = x[i] + h * k3[i];
            }
            f(&tmp, &mut k4);
            for i in 0..k {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t = if target - t <= dt { target } else { t + h };
        }
        out.push(x.clone());
    }
    out
}

/// Monte Carlo error of the particle mean against a reference trajectory,
/// as a function of the particle count.
#[derive(Clone, Debug, PartialEq)]
pub struct McConvergence {
    pub particle_counts: Vec<usize>,
    /// Root mean square over replicas of the sup gap to the reference.
    pub rms_errors: Vec<f64>,
    pub slope: Option<f64>,
}

/// Repeat [`particle_simulate`] `replicas` times per particle count (seeds
/// `seed, seed + 1, ...`) and fit the log-log slope of the RMS sup gap.
pub fn mc_convergence(
    rc: &RateMatrixCoupling,
    x0: &[f64],
    y: &[f64],
    u: &[f64],
    alpha: &[f64],
    counts: &[usize],
    times: &[f64],
    reference: &[Vec<f64>],
    replicas: usize,
    seed: u64,
) -> Result<McConvergence> {
    let mut rms = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut acc = 0.0;
        for r in 0..replicas {
            let traj = particle_simulate(rc, x0, y, u, alpha, n, times, seed.wrapping_add(r as u64))?;
            let gap = sup_gap(&traj.histograms, reference);
            acc += gap * gap;
        }
        rms.push((acc / replicas as f64).sqrt());
    }
    let xs: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    Ok(McConvergence {
        particle_counts: counts.to_vec(),
        slope: loglog_slope(&xs, &rms),
        rms_errors: rms,
    })
}

fn sup_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Least-squares slope of `ln y` against `ln x`; needs at least two positive
/// points.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 || pts.len() != xs.len() {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Worst relative error between the supplied `∂_p F` and central
/// differences over `samples` random points (`x ∈ [0, 1]^k`,
/// `y, U ∈ [-1, 1]`, `p, α ∈ [-2, 2]`). Errors are relative to
/// `max(|FD|∞, 1)`. Returns 0 when the model supplies no gradient.
pub fn fd_check_gradp(spec: &ModelSpec, samples: usize, seed: u64) -> Result<f64> {
    let Some(grad) = spec.hamiltonian_grad_p.as_ref() else {
        return Ok(0.0);
    };
    let (k, d) = (spec.k, spec.d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let mut worst: f64 = 0.0;
    let mut supplied = vec![0.0; d];
    let mut fd = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    for _ in 0..samples {
        let x = sample(k, 0.0, 1.0);
        let y = sample(d, -1.0, 1.0);
        let u = sample(k, -1.0, 1.0);
        let p = sample(d, -2.0, 2.0);
        let a = sample(d, -2.0, 2.0);
        grad(&x, &y, &u, &p, &a, &mut supplied);
        spec.fd_grad_p(&x, &y, &u, &p, &a, &mut fd, &mut scratch)?;
        let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let err = supplied.iter().zip(&fd).fold(0.0f64, |m, (s, f)| m.max((s - f).abs()));
        if !err.is_finite() {
            return Err(Error::evaluation("dF/dp", &x, &y));
        }
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReductionCase {
    /// `A ≡ 0`, `α* ≡ 0`, constant `B` and `U₀`: `U' + λU = B`.
    CrowdOde,
    /// Dynamics off, constant `φ₀ > ψ`, `U₀`, `Ū`: `φ - ψ` and `U - Ū`
    /// decay like `e^{-t/ε}`.
    PenaltyRelaxation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReductionReport {
    pub case: ReductionCase,
    pub dt: f64,
    /// Sup over nodes and steps of the gap to the closed form.
    pub sup_error: f64,
}

/// Sample points of the grid for the decoupling checks: corners and centre.
fn probe_points(grid: &GridSpec) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (k, d) = (grid.k(), grid.d());
    let mut pts = Vec::new();
    let bits = (k + d).min(10);
    for mask in 0..(1usize << bits) {
        let pick = |b: usize, lo: f64, hi: f64| if b < bits && mask & (1 << b) != 0 { hi } else { lo };
        let x = (0..k).map(|i| pick(i, grid.x_min[i], grid.x_max[i])).collect();
        let y = (0..d).map(|j| pick(k + j, grid.y_min[j], grid.y_max[j])).collect();
        pts.push((x, y));
    }
    pts.push((
        (0..k).map(|i| 0.5 * (grid.x_min[i] + grid.x_max[i])).collect(),
        (0..d).map(|j| 0.5 * (grid.y_min[j] + grid.y_max[j])).collect(),
    ));
    pts
}

fn refuse(msg: impl Into<String>) -> Error {
    Error::Configuration(format!("scalar reduction refused: {}", msg.into()))
}

/// Run the solver on a decoupled configuration and compare every node at
/// every step with the closed form. The configuration is probed first and
/// the oracle refuses anything that is not actually decoupled.
pub fn scalar_reduction_check(
    case: ReductionCase,
    spec: &ModelSpec,
    grid: &GridSpec,
    stop: Option<&StoppingSpec>,
    cfg: &SolverConfig,
) -> Result<ReductionReport> {
    let (k, d) = (spec.k, spec.d);
    let pts = probe_points(grid);
    let probes_u: [f64; 2] = [-1.0, 2.0];
    let probes_p: [f64; 2] = [-1.5, 0.7];
    let mut buf = vec![0.0; k];
    let mut grad = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut b_const: Option<Vec<f64>> = None;
    let mut u0_const: Option<Vec<f64>> = None;
    let mut phi0_const: Option<f64> = None;
    for (x, y) in &pts {
        (spec.crowd_initial)(x, y, &mut buf);
        check_constant(&mut u0_const, &buf, "U0 is not constant")?;
        let phi0 = (spec.major_initial)(x, y);
        check_constant_scalar(&mut phi0_const, phi0, "phi0 is not constant")?;
        for &uv in &probes_u {
            let u = vec![uv; k];
            for &pv in &probes_p {
                let p = vec![pv; d];
                let a = vec![0.0; d];
                (spec.crowd_drift)(x, y, &u, &a, &mut buf);
                if buf.iter().any(|v| *v != 0.0) {
                    return Err(refuse("crowd drift A is not identically zero"));
                }
                spec.eval_grad_p(x, y, &u, &p, &a, &mut grad, &mut scratch)?;
                if grad.iter().any(|v| *v != 0.0) {
                    return Err(refuse("dF/dp is not identically zero, so the major control is active"));
                }
                (spec.crowd_source)(x, y, &u, &a, &mut buf);
                check_constant(&mut b_const, &buf, "crowd source B is not constant")?;
                if case == ReductionCase::PenaltyRelaxation {
                    let f = (spec.hamiltonian)(x, y, &u, &p, &a);
                    if f != 0.0 {
                        return Err(refuse("F is not identically zero"));
                    }
                }
            }
        }
    }
    let b = b_const.unwrap_or_default();
    let u0 = u0_const.unwrap_or_default();
    let phi0 = phi0_const.unwrap_or(0.0);
    let lambda = spec.crowd_discount;

    match case {
        ReductionCase::CrowdOde => {
            let exact = |t: f64, c: usize| -> f64 {
                if lambda > 0.0 {
                    b[c] / lambda + (u0[c] - b[c] / lambda) * (-lambda * t).exp()
                } else {
                    u0[c] + b[c] * t
                }
            };
            let solver = Solver::new(spec, grid, cfg, Problem::System)?;
            let n = grid.node_count();
            let mut worst: f64 = 0.0;
            let mut state = solver.initial_state()?;
            for step in 1..=grid.step_count() {
                let dt = grid.time_at(step) - state.t;
                let (mut next, ..) = solver.step(&state, dt)?;
                next.t = grid.time_at(step);
                for c in 0..k {
                    let e = exact(next.t, c);
                    for v in &next.u.values[c * n..(c + 1) * n] {
                        worst = worst.max((v - e).abs());
                    }
                }
                state = next;
            }
            Ok(ReductionReport {
                case,
                dt: grid.dt,
                sup_error: worst,
            })
        }
        ReductionCase::PenaltyRelaxation => {
            let stop = stop.ok_or_else(|| refuse("stopping data required"))?;
            if spec.major_discount != 0.0 || lambda != 0.0 {
                return Err(refuse("rho and lambda must be zero"));
            }
            if b.iter().any(|v| *v != 0.0) {
                return Err(refuse("crowd source B must vanish"));
            }
            let mut psi_const = None;
            let mut ubar_const = None;
            for (x, y) in &pts {
                check_constant_scalar(&mut psi_const, (stop.stopping_cost)(x, y), "psi is not constant")?;
                (stop.post_stop_cost)(x, y, &mut buf);
                check_constant(&mut ubar_const, &buf, "Ubar is not constant")?;
            }
            let psi = psi_const.unwrap_or(0.0);
            let ubar = ubar_const.unwrap_or_default();
            if !(phi0 > psi) {
                return Err(refuse("the relaxation needs phi0 > psi"));
            }
            let rate = 1.0 / stop.epsilon;
            let solver = Solver::new(spec, grid, cfg, Problem::Penalized(stop))?;
            let n = grid.node_count();
            let mut worst: f64 = 0.0;
            let mut state = solver.initial_state()?;
            for step in 1..=grid.step_count() {
                let dt = grid.time_at(step) - state.t;
                let (mut next, ..) = solver.step(&state, dt)?;
                next.t = grid.time_at(step);
                let decay = (-rate * next.t).exp();
                let e_phi = psi + (phi0 - psi) * decay;
                for v in &next.phi.values {
                    worst = worst.max((v - e_phi).abs());
                }
                for c in 0..k {
                    let e = ubar[c] + (u0[c] - ubar[c]) * decay;
                    for v in &next.u.values[c * n..(c + 1) * n] {
                        worst = worst.max((v - e).abs());
                    }
                }
                state = next;
            }
            Ok(ReductionReport {
                case,
                dt: grid.dt,
                sup_error: worst,
            })
        }
    }
}

fn check_constant(slot: &mut Option<Vec<f64>>, value: &[f64], msg: &str) -> Result<()> {
    match slot {
        None => {
            *slot = Some(value.to_vec());
            Ok(())
        }
        Some(v) if v.as_slice() == value => Ok(()),
        Some(_) => Err(refuse(msg)),
    }
}

fn check_constant_scalar(slot: &mut Option<f64>, value: f64, msg: &str) -> Result<()> {
    match slot {
        None => {
            *slot = Some(value);
            Ok(())
        }
        Some(v) if *v == value => Ok(()),
        Some(_) => Err(refuse(msg)),
    }
}

/// Write a particle run next to its reference trajectory as CSV. The header
/// records the seed and the particle count.
pub fn write_particle_csv<W: Write>(traj: &ParticleTrajectory, reference: &[Vec<f64>], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# seed={} N={}", traj.seed, traj.particles)?;
    let k = traj.histograms.first().map_or(0, |h| h.len());
    let mut header = vec!["t".to_string()];
    for i in 1..=k {
        header.push(format!("x{i}_particle"));
        header.push(format!("x{i}_se"));
        header.push(format!("x{i}_reference"));
    }
    writeln!(w, "{}", header.join(","))?;
    for (s, t) in traj.times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        for i in 0..k {
            row.push(traj.histograms[s][i].to_string());
            row.push(traj.std_errors[s][i].to_string());
            row.push(reference.get(s).map_or(f64::NAN, |r| r[i]).to_string());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_validation() {
        assert!(RateMatrixCoupling::constant(vec![-1.0, 1.0, 1.0, -1.0]).unwrap().matrix(&[1.0, 0.0], &[0.0], &[0.0; 2], &[0.0]).is_ok());
        let bad = RateMatrixCoupling::constant(vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!(bad.matrix(&[1.0, 0.0], &[0.0], &[0.0; 2], &[0.0]).is_err());
        let unbalanced = RateMatrixCoupling::constant(vec![-1.0, 2.0, 1.0, -1.0]).unwrap();
        assert!(unbalanced.matrix(&[1.0, 0.0], &[0.0], &[0.0; 2], &[0.0]).is_err());
    }

    #[test]
    fn induced_drift_conserves_mass() {
        let rc = crate::builtin::exchange_rates(3, 0.5, 1.0, 0.5);
        let a = rc.coupling();
        let mut out = [0.0; 3];
        a(&[0.2, 0.7, 1.3], &[0.1], &[0.3, -0.2, 0.9], &[0.4], &mut out);
        assert!(out.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn zero_rates_keep_histogram() {
        let rc = RateMatrixCoupling::constant(vec![0.0; 4]).unwrap();
        let traj = particle_simulate(&rc, &[0.3, 0.7], &[0.0], &[0.0; 2], &[0.0], 1000, &[0.0, 0.5, 1.0], 3).unwrap();
        for h in &traj.histograms {
            assert_eq!(h, &traj.histograms[0]);
        }
    }

    #[test]
    fn same_seed_same_histograms() {
        let rc = RateMatrixCoupling::symmetric_pair(1.0);
        let run = || particle_simulate(&rc, &[1.0, 0.0], &[0.0], &[0.0; 2], &[0.0], 20_000, &[0.5, 1.0], 11).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 10.0, 100.0];
        let ys = [1.0, 0.1, 0.01];
        assert!((loglog_slope(&xs, &ys).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&xs, &[1.0, 0.0, 1.0]), None);
    }

    #[test]
    fn rk4_matches_exponential() {
        let rc = RateMatrixCoupling::symmetric_pair(1.0);
        let a = rc.coupling();
        let xs = characteristic_ode(&a, &[1.0, 0.0], &[0.0], &[0.0; 2], &[0.0], &[1.0], 1e-3);
        let exact = 0.5 * (1.0 + (-2.0f64).exp());
        assert!((xs[0][0] - exact).abs() < 1e-12);
    }
}
