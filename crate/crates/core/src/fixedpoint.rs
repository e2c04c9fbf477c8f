//! Per-node Nash conditions: the control fixed point `α* = ∂_p F(..., α*)`
//! and the bang-bang stopping intensity `β*`.

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Control fields on the grid: `alpha` is node-major with `d` entries per
/// node, `beta` has one entry per node (zero outside stopping runs, `+∞` on
/// the contact set of obstacle runs).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlFields {
    pub d: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ControlFields {
    pub fn zeros(d: usize, nodes: usize) -> Self {
        ControlFields {
            d,
            alpha: vec![0.0; d * nodes],
            beta: vec![0.0; nodes],
        }
    }

    pub fn alpha_at(&self, node: usize) -> &[f64] {
        &self.alpha[node * self.d..(node + 1) * self.d]
    }
}

/// What to do when the damped iteration exhausts `max_iter`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonConvergencePolicy {
    Abort,
    /// Keep the last iterate and count the failure.
    Warn,
    /// Bracketing bisection on `α - ∂_pF(α)` when `d = 1`; abort otherwise.
    Bisect,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions {
    /// Damping θ in `(0, 1]`.
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub policy: NonConvergencePolicy,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            theta: 0.5,
            tol: 1e-10,
            max_iter: 200,
            policy: NonConvergencePolicy::Abort,
        }
    }
}

/// Damping used once oscillation is detected.
pub const ESCALATED_THETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOutcome {
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Scratch buffers for [`solve_alpha_star_into`].
#[derive(Clone, Debug)]
pub struct FixedPointScratch {
    g: Vec<f64>,
    fd: Vec<f64>,
}

impl FixedPointScratch {
    pub fn new(d: usize) -> Self {
        FixedPointScratch {
            g: vec![0.0; d],
            fd: vec![0.0; d],
        }
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Damped Picard iteration `α ← (1-θ)α + θ ∂_pF(x, y, U, p, α)` starting
/// from the value held in `alpha`, which receives the result. The residual
/// `|α - ∂_pF(α)|_∞` is evaluated at the returned `α`.
#[allow(clippy::too_many_arguments)]
pub fn solve_alpha_star_into(
    spec: &ModelSpec,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    p: &[f64],
    alpha: &mut [f64],
    opts: &FixedPointOptions,
    scratch: &mut FixedPointScratch,
) -> Result<FixedPointOutcome> {
    let mut theta = opts.theta;
    let mut previous = f64::INFINITY;
    let mut increases = [false; 5];
    for it in 0..opts.max_iter.max(1) {
        spec.eval_grad_p(x, y, u, p, alpha, &mut scratch.g, &mut scratch.fd)?;
        let residual = sup_diff(alpha, &scratch.g);
        if residual <= opts.tol {
            return Ok(FixedPointOutcome {
                residual,
                iterations: it,
                converged: true,
            });
        }
        increases[it % 5] = residual > previous;
        previous = residual;
        if theta > ESCALATED_THETA && increases.iter().filter(|b| **b).count() >= 2 {
            theta = ESCALATED_THETA;
        }
        for (a, g) in alpha.iter_mut().zip(scratch.g.iter()) {
            *a = (1.0 - theta) * *a + theta * g;
        }
    }
    spec.eval_grad_p(x, y, u, p, alpha, &mut scratch.g, &mut scratch.fd)?;
    let residual = sup_diff(alpha, &scratch.g);
    if residual <= opts.tol {
        return Ok(FixedPointOutcome {
            residual,
            iterations: opts.max_iter,
            converged: true,
        });
    }
    if opts.policy == NonConvergencePolicy::Bisect && alpha.len() == 1 {
        if let Some(out) = bisect_scalar(spec, x, y, u, p, alpha, opts.tol, scratch)? {
            return Ok(out);
        }
    }
    Ok(FixedPointOutcome {
        residual,
        iterations: opts.max_iter,
        converged: false,
    })
}

#[allow(clippy::too_many_arguments)]
fn bisect_scalar(
    spec: &ModelSpec,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    p: &[f64],
    alpha: &mut [f64],
    tol: f64,
    scratch: &mut FixedPointScratch,
) -> Result<Option<FixedPointOutcome>> {
    let eval = |a: f64, scratch: &mut FixedPointScratch| -> Result<f64> {
        spec.eval_grad_p(x, y, u, p, &[a], &mut scratch.g, &mut scratch.fd)?;
        Ok(a - scratch.g[0])
    };
    let centre = alpha[0];
    let mut width = 1.0_f64.max(centre.abs());
    let (mut lo, mut hi) = (centre - width, centre + width);
    let (mut g_lo, mut g_hi) = (eval(lo, scratch)?, eval(hi, scratch)?);
    let mut expansions = 0;
    while g_lo.signum() == g_hi.signum() {
        if expansions == 60 {
            return Ok(None);
        }
        width *= 2.0;
        lo = centre - width;
        hi = centre + width;
        g_lo = eval(lo, scratch)?;
        g_hi = eval(hi, scratch)?;
        expansions += 1;
    }
    for it in 0..200 {
        let mid = 0.5 * (lo + hi);
        let g_mid = eval(mid, scratch)?;
        if g_mid.abs() <= tol || hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
            alpha[0] = mid;
            return Ok(Some(FixedPointOutcome {
                residual: g_mid.abs(),
                iterations: it,
                converged: g_mid.abs() <= tol,
            }));
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    Ok(None)
}

/// Allocating front end of [`solve_alpha_star_into`]; a non-converged solve
/// is an error.
pub fn solve_alpha_star(
    spec: &ModelSpec,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    p: &[f64],
    initial: Option<&[f64]>,
    opts: &FixedPointOptions,
) -> Result<Vec<f64>> {
    let mut alpha = initial.map_or_else(|| vec![0.0; spec.d], <[f64]>::to_vec);
    let mut scratch = FixedPointScratch::new(spec.d);
    let out = solve_alpha_star_into(spec, x, y, u, p, &mut alpha, opts, &mut scratch)?;
    if !out.converged && opts.policy != NonConvergencePolicy::Warn {
        return Err(Error::NonConvergence {
            node: 0,
            iterations: out.iterations,
            residual: out.residual,
        });
    }
    Ok(alpha)
}

/// Bang-bang intensity for one node: `1/ε` where `φ - ψ > tie_tol`, zero
/// otherwise (including the tie band).
#[inline]
pub fn beta_at(phi: f64, psi: f64, epsilon: f64, tie_tol: f64) -> f64 {
    if phi - psi > tie_tol {
        1.0 / epsilon
    } else {
        0.0
    }
}

pub fn compute_beta_star(phi: &[f64], psi: &[f64], epsilon: f64, tie_tol: f64) -> Vec<f64> {
    phi.iter()
        .zip(psi)
        .map(|(f, s)| beta_at(*f, *s, epsilon, tie_tol))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{self, Params};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn lq(c: f64) -> ModelSpec {
        let mut params = Params::new();
        params.insert("c".into(), c);
        builtin::model("lq", 2, 1, &params).unwrap()
    }

    fn solve(spec: &ModelSpec, p: f64) -> Vec<f64> {
        solve_alpha_star(spec, &[0.5, 0.5], &[0.0], &[0.0, 0.0], &[p], None, &FixedPointOptions::default()).unwrap()
    }

    #[test]
    fn lq_closed_form() {
        let a = solve(&lq(0.5), 1.0);
        assert!((a[0] - 2.0).abs() <= 1e-10 / 0.5);
    }

    #[test]
    fn zero_costate_gives_zero_control() {
        for c in [0.1, 0.5, 0.9] {
            assert_eq!(solve(&lq(c), 0.0), vec![0.0]);
        }
    }

    #[test]
    fn map_independent_of_alpha_converges_in_one_step() {
        let spec = lq(0.0);
        let mut alpha = vec![0.0];
        let mut scratch = FixedPointScratch::new(1);
        let opts = FixedPointOptions {
            theta: 1.0,
            ..Default::default()
        };
        let out =
            solve_alpha_star_into(&spec, &[0.5, 0.5], &[0.0], &[0.0, 0.0], &[3.0], &mut alpha, &opts, &mut scratch)
                .unwrap();
        assert_eq!(alpha, vec![3.0]);
        assert_eq!(out.iterations, 1);
    }

    fn expanding_map() -> ModelSpec {
        // ∂_pF = p + 2α: the Picard map is expanding, the root is α = -p.
        let mut spec = lq(0.5);
        spec.hamiltonian_grad_p = Some(Arc::new(|_x, _y, _u, p, a, out: &mut [f64]| {
            out[0] = p[0] + 2.0 * a[0];
        }));
        spec
    }

    #[test]
    fn non_convergence_aborts_by_default() {
        let err = solve_alpha_star(
            &expanding_map(),
            &[0.5, 0.5],
            &[0.0],
            &[0.0, 0.0],
            &[1.0],
            None,
            &FixedPointOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }), "{err}");
    }

    #[test]
    fn bisection_fallback_finds_scalar_root() {
        let opts = FixedPointOptions {
            policy: NonConvergencePolicy::Bisect,
            max_iter: 20,
            ..Default::default()
        };
        let a = solve_alpha_star(&expanding_map(), &[0.5, 0.5], &[0.0], &[0.0, 0.0], &[1.0], None, &opts).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-9, "{a:?}");
    }

    #[test]
    fn warn_policy_returns_last_iterate() {
        let opts = FixedPointOptions {
            policy: NonConvergencePolicy::Warn,
            max_iter: 5,
            ..Default::default()
        };
        let a = solve_alpha_star(&expanding_map(), &[0.5, 0.5], &[0.0], &[0.0, 0.0], &[1.0], None, &opts).unwrap();
        assert!(a[0].is_finite());
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_at(1.5, 1.0, 0.1, 1e-12), 10.0);
        assert_eq!(beta_at(0.5, 1.0, 0.1, 1e-12), 0.0);
        assert_eq!(beta_at(1.0, 1.0, 0.1, 1e-12), 0.0);
        assert_eq!(beta_at(1.0 + 1e-13, 1.0, 0.1, 1e-12), 0.0);
    }

    proptest! {
        #[test]
        fn lq_error_bounded_by_contraction(p in -5.0f64..5.0, c in -0.9f64..0.9) {
            // slow contractions near |c| = 1 need more than the default budget
            let opts = FixedPointOptions { max_iter: 5000, ..Default::default() };
            let a = solve_alpha_star(&lq(c), &[0.5, 0.5], &[0.0], &[0.0, 0.0], &[p], None, &opts).unwrap();
            let exact = p / (1.0 - c);
            prop_assert!((a[0] - exact).abs() <= 1e-10 / (1.0 - c.abs()) + 1e-15);
        }

        #[test]
        fn scaling_costate_scales_control(p in -3.0f64..3.0, s in -4.0f64..4.0) {
            let spec = lq(0.0);
            let undamped = FixedPointOptions { theta: 1.0, ..Default::default() };
            let at = |q: f64, opts: &FixedPointOptions| {
                solve_alpha_star(&spec, &[0.5, 0.5], &[0.0], &[0.0, 0.0], &[q], None, opts).unwrap()[0]
            };
            prop_assert_eq!(at(s * p, &undamped), s * at(p, &undamped));
            let damped = FixedPointOptions::default();
            prop_assert!((at(s * p, &damped) - s * at(p, &damped)).abs() <= 1e-10 * (1.0 + s.abs()));
        }

        #[test]
        fn beta_is_bang_bang_off_the_tie_band(
            phi in proptest::collection::vec(-2.0f64..2.0, 1..50),
            eps in 1e-4f64..1.0,
        ) {
            let psi = vec![0.3; phi.len()];
            let beta = compute_beta_star(&phi, &psi, eps, 1e-12);
            for (b, f) in beta.iter().zip(&phi) {
                prop_assert!(*b >= 0.0 && *b <= 1.0 / eps);
                if (f - 0.3).abs() > 1e-12 {
                    prop_assert!(*b == 0.0 || *b == 1.0 / eps);
                }
            }
        }
    }
}
