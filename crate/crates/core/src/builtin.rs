//! Built-in models and stopping data, selectable by name.
//!
//! * `zero`: every coupling vanishes.
//! * `scalar`: decoupled constants (`F ≡ f0`, `A ≡ 0`, `B ≡ b`), used by the
//!   closed-form reductions.
//! * `lq`: quadratic Hamiltonian `F = ½|p + cα|² + κ_F⟨x, U⟩ - q0(1 + y₁)`,
//!   exchange drift `A = Qᵀx` with rates steered by `U` and by the major
//!   control, congestion source `B_i = cong·x_i`.
//! * `multiplicative`: lq Hamiltonian, drift `a(α)·Ã + V` with
//!   `a(α) = |α|²/(1 + |α|²)`.
//! * `gated`: lq Hamiltonian, drift `G·Ã + C(α, x)` with
//!   `G = (y₁ - y_gate)⁺`.
//!
//! Stopping data: `canonical` (`ψ` affine in `x₁`), `inactive` (`ψ` out of
//! reach), `discontinuous` (`ψ` jumps across `y₁ = 0`), `corridor` (`ψ` low
//! where the histogram entries are within `half_width` of each other, high
//! elsewhere) and `constant`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{
    CouplingFn, ModelSpec, StoppingSpec, StructureForm, StructuredCrowdDynamics,
};
use crate::oracle::RateMatrixCoupling;

pub type Params = BTreeMap<String, f64>;

pub const MODELS: &[&str] = &["zero", "scalar", "lq", "multiplicative", "gated"];
pub const STOPPING: &[&str] = &["canonical", "inactive", "discontinuous", "corridor", "constant"];

const COMMON: &[(&str, f64)] = &[("nu", 0.05), ("rho", 0.0), ("lambda", 1.0)];

const LQ: &[(&str, f64)] = &[
    ("c", 0.5),
    ("kappa_f", 0.5),
    ("r0", 0.5),
    ("kappa_a", 1.0),
    ("gamma", 0.5),
    ("cong", 1.0),
    ("a_phi", 0.2),
    ("s_x", 0.5),
    ("q0", 0.0),
    ("u0", 0.0),
    ("grad_scale", 1.0),
];

const SCALAR: &[(&str, f64)] = &[("f0", 0.0), ("b", 1.0), ("u0", 0.0), ("phi0", 0.0)];

/// Parameter names and defaults of a built-in model (shared rates included).
pub fn model_parameters(name: &str) -> Option<Vec<(&'static str, f64)>> {
    let specific: &[(&str, f64)] = match name {
        "zero" => &[],
        "scalar" => SCALAR,
        "lq" => LQ,
        "multiplicative" => &[
            ("c", 0.5),
            ("kappa_f", 0.5),
            ("r0", 0.5),
            ("kappa_a", 1.0),
            ("v0", 0.5),
            ("cong", 1.0),
            ("a_phi", 0.2),
            ("s_x", 0.5),
            ("q0", 0.0),
            ("u0", 0.0),
        ],
        "gated" => &[
            ("c", 0.5),
            ("kappa_f", 0.5),
            ("r0", 0.5),
            ("kappa_a", 1.0),
            ("gamma_major", 1.0),
            ("y_gate", 0.0),
            ("cong", 1.0),
            ("a_phi", 0.2),
            ("s_x", 0.5),
            ("q0", 0.0),
            ("u0", 0.0),
        ],
        _ => return None,
    };
    let mut all: Vec<(&'static str, f64)> = COMMON.to_vec();
    if name == "zero" {
        all[2].1 = 0.0;
    }
    all.extend_from_slice(specific);
    Some(all)
}

pub fn stopping_parameters(name: &str) -> Option<Vec<(&'static str, f64)>> {
    let p: &[(&str, f64)] = match name {
        "canonical" => &[("epsilon", 0.01), ("psi0", 0.8), ("psi_x", 0.1), ("ubar0", 0.5), ("ubar_x", 0.0)],
        "inactive" => &[("epsilon", 0.01), ("psi0", 1e6), ("ubar0", 0.0)],
        "discontinuous" => &[("epsilon", 0.01), ("psi0", 0.8), ("jump", 0.2), ("ubar0", 0.5)],
        "corridor" => &[("epsilon", 0.01), ("psi0", -1.0), ("psi_out", 5.0), ("half_width", 0.5), ("ubar0", 0.5)],
        "constant" => &[("epsilon", 0.1), ("psi0", 0.0), ("ubar0", 0.0)],
        _ => return None,
    };
    Some(p.to_vec())
}

fn resolve(kind: &str, name: &str, defaults: Vec<(&'static str, f64)>, overrides: &Params) -> Result<Params> {
    let mut out: Params = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (key, value) in overrides {
        match out.get_mut(key) {
            Some(slot) => *slot = *value,
            None => {
                return Err(Error::Configuration(format!("unknown parameter `{key}` for {kind} `{name}`")));
            }
        }
    }
    Ok(out)
}

/// Resolved parameter set (defaults overridden by `overrides`).
pub fn resolve_model_parameters(name: &str, overrides: &Params) -> Result<Params> {
    let defaults =
        model_parameters(name).ok_or_else(|| Error::Configuration(format!("unknown model `{name}`")))?;
    resolve("model", name, defaults, overrides)
}

pub fn resolve_stopping_parameters(name: &str, overrides: &Params) -> Result<Params> {
    let defaults =
        stopping_parameters(name).ok_or_else(|| Error::Configuration(format!("unknown stopping data `{name}`")))?;
    resolve("stopping data", name, defaults, overrides)
}

/// Mass-conserving chain drift `V_1 = -x_1`, `V_i = x_{i-1} - x_i`,
/// `V_k = x_{k-1}`.
fn chain_drift(x: &[f64], scale: f64, out: &mut [f64]) {
    let k = x.len();
    if k == 1 {
        out[0] = 0.0;
        return;
    }
    for i in 0..k {
        let inflow = if i > 0 { x[i - 1] } else { 0.0 };
        let outflow = if i + 1 < k { x[i] } else { 0.0 };
        out[i] = scale * (inflow - outflow);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Exchange rates `Q_ij = r0 (1 + tanh(κ_A (U_i - U_j) + γ sgn(j - i) ᾱ))`.
pub fn exchange_rates(k: usize, r0: f64, kappa_a: f64, gamma: f64) -> RateMatrixCoupling {
    RateMatrixCoupling {
        k,
        rates: Arc::new(move |_x, _y, u, alpha, q: &mut [f64]| {
            let a = mean(alpha);
            for i in 0..k {
                let mut diag = 0.0;
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let sign = if j > i { 1.0 } else { -1.0 };
                    let r = r0 * (1.0 + (kappa_a * (u[i] - u[j]) + gamma * sign * a).tanh());
                    q[i * k + j] = r;
                    diag += r;
                }
                q[i * k + i] = -diag;
            }
        }),
    }
}

fn quadratic_hamiltonian(p: &Params) -> (crate::model::HamiltonianFn, crate::model::GradPFn) {
    let c = p["c"];
    let kappa_f = p["kappa_f"];
    let q0 = p["q0"];
    let grad_scale = p.get("grad_scale").copied().unwrap_or(1.0);
    let f: crate::model::HamiltonianFn = Arc::new(move |x, y, u, pp, alpha| {
        let kinetic: f64 = pp.iter().zip(alpha).map(|(pj, aj)| (pj + c * aj).powi(2)).sum();
        let coupling: f64 = x.iter().zip(u).map(|(xi, ui)| xi * ui).sum();
        0.5 * kinetic + kappa_f * coupling - q0 * (1.0 + y[0])
    });
    let g: crate::model::GradPFn = Arc::new(move |_x, _y, _u, pp, alpha, out: &mut [f64]| {
        for ((o, pj), aj) in out.iter_mut().zip(pp).zip(alpha) {
            *o = grad_scale * (pj + c * aj);
        }
    });
    (f, g)
}

fn congestion(cong: f64) -> CouplingFn {
    Arc::new(move |x, _y, _u, _alpha, out: &mut [f64]| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = cong * xi;
        }
    })
}

fn lq_initial(p: &Params) -> (crate::model::CrowdDataFn, crate::model::ScalarDataFn) {
    let u0 = p["u0"];
    let a_phi = p["a_phi"];
    let s_x = p["s_x"];
    (
        Arc::new(move |_x, _y, out: &mut [f64]| out.fill(u0)),
        Arc::new(move |x, y| a_phi * y.iter().map(|yj| (PI * yj).cos()).sum::<f64>() + s_x * x[0] * x[0]),
    )
}

/// Controlled part `Ã = Q_Uᵀ x` of the structured models: exchange rates
/// steered by the crowd values only.
fn controlled_exchange(k: usize, r0: f64, kappa_a: f64) -> crate::model::ControlledDriftFn {
    let rc = exchange_rates(k, r0, kappa_a, 0.0);
    let zero_alpha = [0.0];
    Arc::new(move |x, y, u, out: &mut [f64]| {
        let mut stack = [0.0; 16];
        let mut heap;
        let q: &mut [f64] = if k * k <= stack.len() {
            &mut stack[..k * k]
        } else {
            heap = vec![0.0; k * k];
            &mut heap
        };
        (rc.rates)(x, y, u, &zero_alpha, q);
        transpose_apply(q, x, out);
    })
}

pub(crate) fn transpose_apply(q: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for j in 0..k {
        out[j] = (0..k).map(|i| q[i * k + j] * x[i]).sum();
    }
}

pub fn multiplicative_dynamics(k: usize, p: &Params) -> StructuredCrowdDynamics {
    let v0 = p["v0"];
    StructuredCrowdDynamics {
        form: StructureForm::MultiplicativeAlpha,
        k,
        controlled: Some(controlled_exchange(k, p["r0"], p["kappa_a"])),
        autonomous: Some(Arc::new(move |x, out: &mut [f64]| chain_drift(x, v0, out))),
        inhibition: Some(Arc::new(|alpha: &[f64]| {
            let s: f64 = alpha.iter().map(|a| a * a).sum();
            s / (1.0 + s)
        })),
        gate: None,
        imposed: None,
    }
}

pub fn gated_dynamics(k: usize, p: &Params) -> StructuredCrowdDynamics {
    let gamma = p["gamma_major"];
    let y_gate = p["y_gate"];
    StructuredCrowdDynamics {
        form: StructureForm::Gated,
        k,
        controlled: Some(controlled_exchange(k, p["r0"], p["kappa_a"])),
        autonomous: None,
        inhibition: None,
        gate: Some(Arc::new(move |_x, y| (y[0] - y_gate).max(0.0))),
        imposed: Some(Arc::new(move |alpha: &[f64], x: &[f64], out: &mut [f64]| {
            chain_drift(x, gamma * mean(alpha), out)
        })),
    }
}

/// Build a named model for `k` crowd states and a `d`-dimensional major state.
pub fn model(name: &str, k: usize, d: usize, overrides: &Params) -> Result<ModelSpec> {
    let p = resolve_model_parameters(name, overrides)?;
    let (nu, rho, lambda) = (p["nu"], p["rho"], p["lambda"]);
    let base = |hamiltonian, grad, drift, source, crowd_initial, major_initial| ModelSpec {
        name: name.to_string(),
        k,
        d,
        noise: nu,
        major_discount: rho,
        crowd_discount: lambda,
        hamiltonian,
        hamiltonian_grad_p: Some(grad),
        crowd_drift: drift,
        crowd_source: source,
        crowd_initial,
        major_initial,
    };
    let spec = match name {
        "zero" | "scalar" => {
            let f0 = p.get("f0").copied().unwrap_or(0.0);
            let b = p.get("b").copied().unwrap_or(0.0);
            let u0 = p.get("u0").copied().unwrap_or(0.0);
            let phi0 = p.get("phi0").copied().unwrap_or(0.0);
            base(
                Arc::new(move |_x: &[f64], _y: &[f64], _u: &[f64], _p: &[f64], _a: &[f64]| f0),
                Arc::new(|_x: &[f64], _y: &[f64], _u: &[f64], _p: &[f64], _a: &[f64], out: &mut [f64]| out.fill(0.0)),
                Arc::new(|_x: &[f64], _y: &[f64], _u: &[f64], _a: &[f64], out: &mut [f64]| out.fill(0.0)),
                Arc::new(move |_x: &[f64], _y: &[f64], _u: &[f64], _a: &[f64], out: &mut [f64]| out.fill(b)),
                Arc::new(move |_x: &[f64], _y: &[f64], out: &mut [f64]| out.fill(u0)),
                Arc::new(move |_x: &[f64], _y: &[f64]| phi0),
            )
        }
        "lq" => {
            let (f, g) = quadratic_hamiltonian(&p);
            let (u0, phi0) = lq_initial(&p);
            let rc = exchange_rates(k, p["r0"], p["kappa_a"], p["gamma"]);
            base(f, g, rc.coupling(), congestion(p["cong"]), u0, phi0)
        }
        "multiplicative" | "gated" => {
            let (f, g) = quadratic_hamiltonian(&p);
            let (u0, phi0) = lq_initial(&p);
            let sdyn = if name == "gated" {
                gated_dynamics(k, &p)
            } else {
                multiplicative_dynamics(k, &p)
            };
            base(f, g, sdyn.build_coupling()?, congestion(p["cong"]), u0, phi0)
        }
        _ => unreachable!("resolve rejects unknown names"),
    };
    Ok(spec)
}

/// Build named stopping data.
pub fn stopping(name: &str, overrides: &Params) -> Result<StoppingSpec> {
    let p = resolve_stopping_parameters(name, overrides)?;
    let epsilon = p["epsilon"];
    if !(epsilon > 0.0) {
        return Err(Error::validation("epsilon", "epsilon must be positive"));
    }
    let psi0 = p["psi0"];
    let ubar0 = p["ubar0"];
    let (psi, ubar): (crate::model::ScalarDataFn, crate::model::CrowdDataFn) = match name {
        "canonical" => {
            let psi_x = p["psi_x"];
            let ubar_x = p["ubar_x"];
            (
                Arc::new(move |x, _y| psi0 + psi_x * x[0]),
                Arc::new(move |x, _y, out: &mut [f64]| {
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = ubar0 + ubar_x * xi;
                    }
                }),
            )
        }
        "discontinuous" => {
            let jump = p["jump"];
            (
                Arc::new(move |_x, y| if y[0] > 0.0 { psi0 + jump } else { psi0 }),
                Arc::new(move |_x, _y, out: &mut [f64]| out.fill(ubar0)),
            )
        }
        "corridor" => {
            let psi_out = p["psi_out"];
            let half_width = p["half_width"];
            (
                Arc::new(move |x, _y| {
                    let spread = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
                        - x.iter().fold(f64::INFINITY, |m, v| m.min(*v));
                    if spread <= half_width {
                        psi0
                    } else {
                        psi_out
                    }
                }),
                Arc::new(move |_x, _y, out: &mut [f64]| out.fill(ubar0)),
            )
        }
        "inactive" | "constant" => (
            Arc::new(move |_x, _y| psi0),
            Arc::new(move |_x, _y, out: &mut [f64]| out.fill(ubar0)),
        ),
        _ => unreachable!("resolve rejects unknown names"),
    };
    Ok(StoppingSpec {
        name: name.to_string(),
        stopping_cost: psi,
        post_stop_cost: ubar,
        epsilon,
    })
}
