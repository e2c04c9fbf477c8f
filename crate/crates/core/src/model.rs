//! Problem data for the major-player system: the Hamiltonian of the major
//! player, the crowd couplings, initial data and the stopping data.
//!
//! All couplings are shared function handles. Argument order follows the
//! mathematical notation: `x` is the (unnormalized) crowd histogram in `R^k`,
//! `y` the major state in `R^d`, `u` the crowd value vector in `R^k`, `p` the
//! major costate `∇_y φ` and `alpha` the major control, both in `R^d`.
//! Vector-valued handles write into an output slice instead of allocating.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// `F(x, y, U, p, α)`.
pub type HamiltonianFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
/// `∂_p F(x, y, U, p, α)` written into the last argument (length `d`).
pub type GradPFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `A(x, y, U, α)` or `B(x, y, U, α)` written into the last argument (length `k`).
pub type CouplingFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `U₀(x, y)` or `Ū(x, y)` written into the last argument (length `k`).
pub type CrowdDataFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `φ₀(x, y)`, `ψ(x, y)`.
pub type ScalarDataFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Relative step of the central-difference fallback for `∂_p F`.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    /// Number of crowd states.
    pub k: usize,
    /// Dimension of the major state.
    pub d: usize,
    /// Noise intensity ν of the major player.
    pub noise: f64,
    /// Discount rate ρ of the major player.
    pub major_discount: f64,
    /// Discount rate λ of the crowd.
    pub crowd_discount: f64,
    pub hamiltonian: HamiltonianFn,
    pub hamiltonian_grad_p: Option<GradPFn>,
    /// Crowd drift `A`.
    pub crowd_drift: CouplingFn,
    /// Crowd source `B`.
    pub crowd_source: CouplingFn,
    pub crowd_initial: CrowdDataFn,
    pub major_initial: ScalarDataFn,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("k", &self.k)
            .field("d", &self.d)
            .field("noise", &self.noise)
            .field("major_discount", &self.major_discount)
            .field("crowd_discount", &self.crowd_discount)
            .field("hamiltonian_grad_p", &self.hamiltonian_grad_p.is_some())
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn with_crowd_discount(&self, lambda: f64) -> ModelSpec {
        ModelSpec {
            crowd_discount: lambda,
            ..self.clone()
        }
    }

    /// `∂_p F` at one point: the supplied gradient if present, central
    /// differences of `F` otherwise. `scratch` must hold at least `d` values.
    pub fn eval_grad_p(
        &self,
        x: &[f64],
        y: &[f64],
        u: &[f64],
        p: &[f64],
        alpha: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<()> {
        match &self.hamiltonian_grad_p {
            Some(g) => {
                g(x, y, u, p, alpha, out);
                if out.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::evaluation("gradient of F", x, y))
                }
            }
            None => self.fd_grad_p(x, y, u, p, alpha, out, scratch),
        }
    }

    /// Central finite differences of `F` in `p` with step `1e-5·(1+|p|)`.
    pub fn fd_grad_p(
        &self,
        x: &[f64],
        y: &[f64],
        u: &[f64],
        p: &[f64],
        alpha: &[f64],
        out: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<()> {
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = FD_STEP * (1.0 + norm);
        let shifted = &mut scratch[..p.len()];
        shifted.copy_from_slice(p);
        for j in 0..p.len() {
            shifted[j] = p[j] + h;
            let plus = (self.hamiltonian)(x, y, u, shifted, alpha);
            shifted[j] = p[j] - h;
            let minus = (self.hamiltonian)(x, y, u, shifted, alpha);
            shifted[j] = p[j];
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::evaluation("F", x, y));
            }
            out[j] = (plus - minus) / (2.0 * h);
        }
        Ok(())
    }

    /// Convenience allocating variant of [`ModelSpec::eval_grad_p`].
    pub fn grad_p(&self, x: &[f64], y: &[f64], u: &[f64], p: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        let mut scratch = vec![0.0; self.d];
        self.eval_grad_p(x, y, u, p, alpha, &mut out, &mut scratch)?;
        Ok(out)
    }
}

/// Which of the two lead-taking structures a crowd drift follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureForm {
    /// `A = a(α)·Ã(x, y, U) + V(x)`: the major can switch off the crowd's own
    /// control and leave it drifting along `V`.
    MultiplicativeAlpha,
    /// `A = G(x, y)·Ã(x, y, U) + C(α, x)`: where the gate `G` vanishes the
    /// crowd moves only as imposed by the major.
    Gated,
}

pub type ControlledDriftFn = Arc<dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type AutonomousDriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type GateFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type ImposedDriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type InhibitionFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Handles for a structured crowd drift. Only the handles belonging to
/// `form` may be set.
#[derive(Clone)]
pub struct StructuredCrowdDynamics {
    pub form: StructureForm,
    pub k: usize,
    /// `Ã(x, y, U)`, used by both forms.
    pub controlled: Option<ControlledDriftFn>,
    /// `V(x)`, multiplicative form.
    pub autonomous: Option<AutonomousDriftFn>,
    /// `a(α) ≥ 0`, multiplicative form.
    pub inhibition: Option<InhibitionFn>,
    /// `G(x, y) ≥ 0`, gated form.
    pub gate: Option<GateFn>,
    /// `C(α, x)`, gated form.
    pub imposed: Option<ImposedDriftFn>,
}

impl StructuredCrowdDynamics {
    /// Assemble the crowd drift `A(x, y, U, α)`.
    pub fn build_coupling(&self) -> Result<CouplingFn> {
        let controlled = self
            .controlled
            .clone()
            .ok_or_else(|| Error::Configuration("structured dynamics need the controlled drift".into()))?;
        let k = self.k;
        match self.form {
            StructureForm::MultiplicativeAlpha => {
                if self.gate.is_some() || self.imposed.is_some() {
                    return Err(Error::Configuration(
                        "multiplicative form does not take a gate or an imposed drift".into(),
                    ));
                }
                let (Some(inhibition), Some(autonomous)) = (self.inhibition.clone(), self.autonomous.clone())
                else {
                    return Err(Error::Configuration(
                        "multiplicative form needs an inhibition factor and an autonomous drift".into(),
                    ));
                };
                Ok(Arc::new(move |x, y, u, alpha, out: &mut [f64]| {
                    let a = inhibition(alpha);
                    let mut v = [0.0; 16];
                    let mut v_heap;
                    let v: &mut [f64] = if k <= v.len() {
                        &mut v[..k]
                    } else {
                        v_heap = vec![0.0; k];
                        &mut v_heap
                    };
                    autonomous(x, v);
                    if a == 0.0 {
                        out.copy_from_slice(v);
                    } else {
                        controlled(x, y, u, out);
                        for (o, vi) in out.iter_mut().zip(v.iter()) {
                            *o = a * *o + vi;
                        }
                    }
                }))
            }
            StructureForm::Gated => {
                if self.inhibition.is_some() || self.autonomous.is_some() {
                    return Err(Error::Configuration(
                        "gated form does not take an inhibition factor or an autonomous drift".into(),
                    ));
                }
                let (Some(gate), Some(imposed)) = (self.gate.clone(), self.imposed.clone()) else {
                    return Err(Error::Configuration("gated form needs a gate and an imposed drift".into()));
                };
                Ok(Arc::new(move |x, y, u, alpha, out: &mut [f64]| {
                    let g = gate(x, y);
                    imposed(alpha, x, out);
                    if g != 0.0 {
                        let mut c = [0.0; 16];
                        let mut c_heap;
                        let c: &mut [f64] = if k <= c.len() {
                            &mut c[..k]
                        } else {
                            c_heap = vec![0.0; k];
                            &mut c_heap
                        };
                        controlled(x, y, u, c);
                        for (o, ci) in out.iter_mut().zip(c.iter()) {
                            *o += g * ci;
                        }
                    }
                }))
            }
        }
    }
}

/// Stopping data of the major player.
#[derive(Clone)]
pub struct StoppingSpec {
    pub name: String,
    /// Stopping cost ψ.
    pub stopping_cost: ScalarDataFn,
    /// Crowd cost Ū once the game has been stopped.
    pub post_stop_cost: CrowdDataFn,
    /// Intensity bound `1/ε` of the penalized problem.
    pub epsilon: f64,
}

impl fmt::Debug for StoppingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StoppingSpec")
            .field("name", &self.name)
            .field("epsilon", &self.epsilon)
            .finish_non_exhaustive()
    }
}

impl StoppingSpec {
    pub fn with_epsilon(&self, epsilon: f64) -> StoppingSpec {
        StoppingSpec {
            epsilon,
            ..self.clone()
        }
    }
}

/// Outcome of [`validate_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub samples: usize,
    /// `Σ_i A_i = 0` held (to roundoff) at every sample.
    pub mass_conserving: bool,
}

/// Check the model invariants and evaluate every handle at the grid corners
/// and centre.
pub fn validate_model(spec: &ModelSpec, grid: &GridSpec) -> Result<ValidationReport> {
    if !(spec.noise > 0.0) {
        return Err(Error::validation("nu", "nu must be positive"));
    }
    if !(spec.major_discount >= 0.0) {
        return Err(Error::validation("rho", "rho must be nonnegative"));
    }
    if !(spec.crowd_discount >= 0.0) {
        return Err(Error::validation("lambda", "lambda must be nonnegative"));
    }
    if spec.k == 0 {
        return Err(Error::validation("k", "k must be at least 1"));
    }
    if spec.d == 0 {
        return Err(Error::validation("d", "d must be at least 1"));
    }
    if spec.k != grid.k() {
        return Err(Error::validation(
            "k",
            format!("model has k = {} but the grid has {} x-dimensions", spec.k, grid.k()),
        ));
    }
    if spec.d != grid.d() {
        return Err(Error::validation(
            "d",
            format!("model has d = {} but the grid has {} y-dimensions", spec.d, grid.d()),
        ));
    }

    let (k, d) = (spec.k, spec.d);
    let dims = k + d;
    let corner_bits = dims.min(12);
    let mut points: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for mask in 0..(1usize << corner_bits) {
        let pick = |bit: usize, lo: f64, hi: f64| {
            if bit < corner_bits && mask & (1 << bit) != 0 {
                hi
            } else {
                lo
            }
        };
        let x = (0..k).map(|i| pick(i, grid.x_min[i], grid.x_max[i])).collect();
        let y = (0..d).map(|j| pick(k + j, grid.y_min[j], grid.y_max[j])).collect();
        points.push((x, y));
    }
    let centre_x = (0..k).map(|i| 0.5 * (grid.x_min[i] + grid.x_max[i])).collect();
    let centre_y = (0..d).map(|j| 0.5 * (grid.y_min[j] + grid.y_max[j])).collect();
    points.push((centre_x, centre_y));

    let mut u = vec![0.0; k];
    let mut a = vec![0.0; k];
    let mut b = vec![0.0; k];
    let mut g = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let zero_d = vec![0.0; d];
    let mut mass_conserving = true;
    for (x, y) in &points {
        (spec.crowd_initial)(x, y, &mut u);
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::evaluation("U0", x, y));
        }
        if !(spec.major_initial)(x, y).is_finite() {
            return Err(Error::evaluation("phi0", x, y));
        }
        if !(spec.hamiltonian)(x, y, &u, &zero_d, &zero_d).is_finite() {
            return Err(Error::evaluation("F", x, y));
        }
        spec.eval_grad_p(x, y, &u, &zero_d, &zero_d, &mut g, &mut scratch)?;
        (spec.crowd_drift)(x, y, &u, &zero_d, &mut a);
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::evaluation("A", x, y));
        }
        (spec.crowd_source)(x, y, &u, &zero_d, &mut b);
        if !b.iter().all(|v| v.is_finite()) {
            return Err(Error::evaluation("B", x, y));
        }
        let sum: f64 = a.iter().sum();
        let scale: f64 = a.iter().map(|v| v.abs()).sum();
        if sum.abs() > 1e-12 * (1.0 + scale) {
            mass_conserving = false;
        }
    }
    Ok(ValidationReport {
        samples: points.len(),
        mass_conserving,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{self, Params};

    fn exchange_model() -> ModelSpec {
        let mut spec = builtin::model("zero", 2, 1, &Params::new()).unwrap();
        spec.crowd_drift = Arc::new(|x, _y, _u, _a, out: &mut [f64]| {
            out[0] = x[1] - x[0];
            out[1] = x[0] - x[1];
        });
        spec
    }

    fn grid() -> GridSpec {
        GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![5, 5], vec![-1.0], vec![1.0], vec![5], 1.0, 1e-3)
    }

    #[test]
    fn lq_grad_p_is_p_plus_c_alpha() {
        let spec = builtin::model("lq", 2, 1, &Params::new()).unwrap();
        let g = spec.grad_p(&[0.3, 0.2], &[0.1], &[0.0, 0.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn constant_in_p_gives_zero_gradient() {
        let mut spec = builtin::model("scalar", 1, 2, &Params::new()).unwrap();
        spec.hamiltonian_grad_p = None;
        spec.hamiltonian = Arc::new(|_x, _y, _u, _p, _a| 3.5);
        let g = spec.grad_p(&[0.5], &[0.1, 0.2], &[0.0], &[0.7, -1.2], &[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_hamiltonian_is_reported_with_point() {
        let mut spec = builtin::model("lq", 2, 1, &Params::new()).unwrap();
        spec.hamiltonian_grad_p = None;
        spec.hamiltonian = Arc::new(|_x, _y, _u, p, _a| if p[0] > 0.0 { f64::NAN } else { 0.0 });
        let err = spec.grad_p(&[0.25, 0.5], &[0.75], &[0.0, 0.0], &[0.0], &[0.0]).unwrap_err();
        match err {
            Error::Evaluation { x, y, .. } => {
                assert_eq!(x, vec![0.25, 0.5]);
                assert_eq!(y, vec![0.75]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn zero_noise_is_rejected() {
        let mut spec = builtin::model("zero", 2, 1, &Params::new()).unwrap();
        spec.noise = 0.0;
        let err = validate_model(&spec, &grid()).unwrap_err();
        assert!(err.to_string().contains("nu must be positive"), "{err}");
    }

    #[test]
    fn exchange_coupling_is_flagged_mass_conserving() {
        let report = validate_model(&exchange_model(), &grid()).unwrap();
        assert!(report.mass_conserving);
        assert_eq!(report.samples, 9);

        let mut leaky = exchange_model();
        leaky.crowd_drift = Arc::new(|x, _y, _u, _a, out: &mut [f64]| {
            out[0] = -x[0];
            out[1] = 0.0;
        });
        assert!(!validate_model(&leaky, &grid()).unwrap().mass_conserving);
    }

    #[test]
    fn nan_source_at_a_corner_is_an_evaluation_error() {
        let mut spec = exchange_model();
        spec.crowd_source = Arc::new(|x, _y, _u, _a, out: &mut [f64]| {
            let v = if x[0] == 1.0 && x[1] == 1.0 { f64::NAN } else { 0.0 };
            out.fill(v);
        });
        let err = validate_model(&spec, &grid()).unwrap_err();
        assert!(matches!(err, Error::Evaluation { quantity: "B", .. }), "{err}");
    }

    fn controlled() -> ControlledDriftFn {
        Arc::new(|x, _y, u, out: &mut [f64]| {
            out[0] = u[0] * x[1] - u[1] * x[0];
            out[1] = -out[0];
        })
    }

    #[test]
    fn multiplicative_with_vanishing_factor_is_pure_drift() {
        let sdyn = StructuredCrowdDynamics {
            form: StructureForm::MultiplicativeAlpha,
            k: 2,
            controlled: Some(controlled()),
            autonomous: Some(Arc::new(|x, out: &mut [f64]| {
                out[0] = -x[0];
                out[1] = x[0];
            })),
            inhibition: Some(Arc::new(|alpha: &[f64]| alpha[0].abs())),
            gate: None,
            imposed: None,
        };
        let a = sdyn.build_coupling().unwrap();
        let mut out = [0.0; 2];
        for u in [[0.0, 0.0], [3.0, -2.0], [1e6, 7.0]] {
            a(&[0.4, 0.6], &[0.0], &u, &[0.0], &mut out);
            assert_eq!(out, [-0.4, 0.4]);
        }
    }

    #[test]
    fn gated_closed_gate_ignores_u_and_open_gate_recovers_controlled() {
        let mut sdyn = StructuredCrowdDynamics {
            form: StructureForm::Gated,
            k: 2,
            controlled: Some(controlled()),
            autonomous: None,
            inhibition: None,
            gate: Some(Arc::new(|_x, _y| 0.0)),
            imposed: Some(Arc::new(|alpha: &[f64], x: &[f64], out: &mut [f64]| {
                out[0] = -alpha[0] * x[0];
                out[1] = alpha[0] * x[0];
            })),
        };
        let a = sdyn.build_coupling().unwrap();
        let (mut o1, mut o2) = ([0.0; 2], [0.0; 2]);
        a(&[0.3, 0.7], &[0.2], &[1.0, 2.0], &[0.5], &mut o1);
        a(&[0.3, 0.7], &[0.2], &[-4.0, 9.0], &[0.5], &mut o2);
        assert_eq!(o1, o2);

        sdyn.gate = Some(Arc::new(|_x, _y| 1.0));
        sdyn.imposed = Some(Arc::new(|_alpha: &[f64], _x: &[f64], out: &mut [f64]| out.fill(0.0)));
        let a = sdyn.build_coupling().unwrap();
        let mut expected = [0.0; 2];
        controlled()(&[0.3, 0.7], &[0.2], &[1.0, 2.0], &mut expected);
        a(&[0.3, 0.7], &[0.2], &[1.0, 2.0], &[0.5], &mut o1);
        assert_eq!(o1, expected);
    }

    #[test]
    fn mismatched_handles_are_a_configuration_error() {
        let sdyn = StructuredCrowdDynamics {
            form: StructureForm::Gated,
            k: 2,
            controlled: Some(controlled()),
            autonomous: Some(Arc::new(|_x, out: &mut [f64]| out.fill(0.0))),
            inhibition: None,
            gate: Some(Arc::new(|_x, _y| 1.0)),
            imposed: Some(Arc::new(|_a: &[f64], _x: &[f64], out: &mut [f64]| out.fill(0.0))),
        };
        assert!(matches!(sdyn.build_coupling(), Err(Error::Configuration(_))));

        let missing = StructuredCrowdDynamics {
            form: StructureForm::MultiplicativeAlpha,
            k: 2,
            controlled: Some(controlled()),
            autonomous: None,
            inhibition: None,
            gate: None,
            imposed: None,
        };
        assert!(matches!(missing.build_coupling(), Err(Error::Configuration(_))));
    }
}
