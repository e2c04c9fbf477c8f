#![allow(dead_code)]

use std::sync::Arc;

use major_mfg::builtin::{self, Params};
use major_mfg::{GridSpec, ModelSpec};

pub fn params(pairs: &[(&str, f64)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// `k = 2`, `d = 1` grid on `[0, 2]² × [-1, 1]`.
pub fn grid2(n_x: usize, n_y: usize, horizon: f64, dt: f64) -> GridSpec {
    GridSpec::new(vec![0.0, 0.0], vec![2.0, 2.0], vec![n_x, n_x], vec![-1.0], vec![1.0], vec![n_y], horizon, dt)
}

/// `k = 1`, `d = 1` grid on `[0, 1] × [-1, 1]`.
pub fn grid1(n_x: usize, n_y: usize, horizon: f64, dt: f64) -> GridSpec {
    GridSpec::new(vec![0.0], vec![1.0], vec![n_x], vec![-1.0], vec![1.0], vec![n_y], horizon, dt)
}

pub fn lq(overrides: &[(&str, f64)]) -> ModelSpec {
    builtin::model("lq", 2, 1, &params(overrides)).unwrap()
}

/// Every coupling switched off; only the diffusion of φ remains.
pub fn heat_model(k: usize, nu: f64, phi0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ModelSpec {
    ModelSpec {
        name: "heat".into(),
        k,
        d: 1,
        noise: nu,
        major_discount: 0.0,
        crowd_discount: 0.0,
        hamiltonian: Arc::new(|_, _, _, _, _| 0.0),
        hamiltonian_grad_p: Some(Arc::new(|_, _, _, _, _, out: &mut [f64]| out.fill(0.0))),
        crowd_drift: Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)),
        crowd_source: Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)),
        crowd_initial: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
        major_initial: Arc::new(move |_x, y| phi0(y)),
    }
}

pub fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
