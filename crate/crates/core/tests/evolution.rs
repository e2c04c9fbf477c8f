mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use common::*;
use major_mfg::builtin::{self, Params};
use major_mfg::evolution::{write_diagnostics_csv, write_snapshot_csv};
use major_mfg::*;
use nalgebra::{DMatrix, DVector};

#[test]
fn zero_model_stays_zero() {
    let spec = builtin::model("zero", 2, 1, &Params::new()).unwrap();
    let grid = grid2(5, 9, 0.2, 1e-2);
    let run = solve_system(&spec, &grid, &SolverConfig::default()).unwrap();
    for s in &run.snapshots {
        assert!(s.phi.values.iter().all(|v| *v == 0.0));
        assert!(s.u.values.iter().all(|v| *v == 0.0));
        assert!(s.controls.alpha.iter().all(|v| *v == 0.0));
    }
    assert_eq!(run.final_state().t, 0.2);
}

/// Implicit Euler for `φ_t = νφ_yy` with mirrored ghosts, assembled densely.
fn heat_oracle(phi: &[f64], h: f64, nu: f64, dt: f64, steps: usize) -> Vec<f64> {
    let n = phi.len();
    let r = nu * dt / (h * h);
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0 + 2.0 * r;
        if i == 0 {
            m[(0, 1)] = -2.0 * r;
        } else if i + 1 == n {
            m[(i, i - 1)] = -2.0 * r;
        } else {
            m[(i, i - 1)] = -r;
            m[(i, i + 1)] = -r;
        }
    }
    let lu = m.lu();
    let mut v = DVector::from_column_slice(phi);
    for _ in 0..steps {
        v = lu.solve(&v).unwrap();
    }
    v.as_slice().to_vec()
}

#[test]
fn pure_diffusion_matches_dense_heat_solve_and_flattens() {
    let n_y = 21;
    let nu = 0.05;
    let spec = heat_model(1, nu, |y| (PI * y[0]).cos() + 0.3 * y[0]);
    let grid = grid1(3, n_y, 2.0, 1e-2);
    let run = solve_system(&spec, &grid, &SolverConfig::default()).unwrap();
    let initial = &run.snapshots[0].phi.values[..n_y];
    let expected = heat_oracle(initial, 0.1, nu, 1e-2, 200);
    let phi = &run.final_state().phi.values;
    for line in 0..3 {
        assert!(sup_gap(&phi[line * n_y..(line + 1) * n_y], &expected) < 1e-12);
    }

    // Long run: the trapezoid mean is conserved and the profile flattens.
    let long = grid1(3, n_y, 100.0, 0.1);
    let run = solve_system(&spec, &long, &SolverConfig::default()).unwrap();
    let trap = |v: &[f64]| (v[1..n_y - 1].iter().sum::<f64>() + 0.5 * (v[0] + v[n_y - 1])) / (n_y - 1) as f64;
    let mean0 = trap(&run.snapshots[0].phi.values[..n_y]);
    let last = &run.final_state().phi.values[..n_y];
    assert!((trap(last) - mean0).abs() < 1e-12);
    let spread = last.iter().map(|v| (v - mean0).abs()).fold(0.0, f64::max);
    assert!(spread < 1e-3, "spread {spread}");
}

#[test]
fn decoupled_crowd_line_follows_implicit_euler_and_closed_form() {
    let spec = builtin::model("scalar", 1, 1, &params(&[("lambda", 10.0), ("b", 1.0)])).unwrap();
    let grid = grid1(3, 5, 1.0, 1e-3);
    let mut cfg = SolverConfig::default();
    cfg.snapshot_every = 1;
    let run = solve_system(&spec, &grid, &cfg).unwrap();
    let mut recurrence = 0.0;
    for (n, s) in run.snapshots.iter().enumerate() {
        if n > 0 {
            recurrence = (recurrence + 1e-3) / (1.0 + 1e-2);
        }
        let exact = (1.0 - (-10.0 * s.t).exp()) / 10.0;
        for u in &s.u.values {
            assert!((u - recurrence).abs() < 1e-13);
            assert!((u - exact).abs() < 5e-3 * 1e-1);
        }
    }
}

#[test]
fn myopic_equals_system_when_the_crowd_does_not_feed_back() {
    let spec = lq(&[("kappa_f", 0.0), ("kappa_a", 0.0), ("cong", 0.0), ("u0", 0.0), ("lambda", 3.0)]);
    let grid = grid2(6, 11, 0.3, 2e-3);
    let cfg = SolverConfig::default();
    let system = solve_system(&spec, &grid, &cfg).unwrap();
    let myopic = solve_myopic(&spec, &grid, &cfg).unwrap();
    assert_eq!(system.snapshots.len(), myopic.snapshots.len());
    for (a, b) in system.snapshots.iter().zip(&myopic.snapshots) {
        assert!(sup_gap(&a.phi.values, &b.phi.values) <= 1e-12);
        assert!(a.u.values.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn myopic_run_keeps_crowd_values_at_zero() {
    let spec = lq(&[]);
    let grid = grid2(5, 9, 0.1, 2e-3);
    let run = solve_myopic(&spec, &grid, &SolverConfig::default()).unwrap();
    assert!(run.final_state().u.values.iter().all(|v| *v == 0.0));
    assert!(run.final_state().phi.sup_norm() > 0.0);
}

#[test]
fn ordered_initial_data_stay_ordered() {
    let low = lq(&[("s_x", 0.0), ("kappa_f", 0.1)]);
    let mut high = low.clone();
    let base = low.major_initial.clone();
    high.major_initial = Arc::new(move |x, y| base(x, y) + 0.05 * (1.0 + (PI * y[0]).cos()) + 0.02 * x[0]);
    let grid = grid2(6, 11, 0.5, 4e-3);
    let mut cfg = SolverConfig::default();
    cfg.snapshot_every = 1;
    let a = Solver::new(&low, &grid, &cfg, Problem::Myopic).unwrap().run_collect().unwrap();
    let b = Solver::new(&high, &grid, &cfg, Problem::Myopic).unwrap().run_collect().unwrap();
    for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
        for (pa, pb) in sa.phi.values.iter().zip(&sb.phi.values) {
            assert!(pa <= pb, "order lost at t = {}: {pa} > {pb}", sa.t);
        }
    }
}

#[test]
fn fixed_point_residual_is_small_at_every_step() {
    let spec = lq(&[]);
    let grid = grid2(6, 11, 0.2, 2e-3);
    let run = solve_system(&spec, &grid, &SolverConfig::default()).unwrap();
    assert_eq!(run.diagnostics.step_residuals.len(), grid.step_count() + 1);
    assert!(run.diagnostics.max_fp_residual() <= 1e-10);
    assert_eq!(run.diagnostics.fp_failures, 0);
    // controls satisfy the LQ closed form α* = p / (1 - c)
    let s = run.final_state();
    let axes = grid.axes();
    for node in 0..grid.node_count() {
        let p = grid::central_at(&s.phi.values, node, &axes[2]);
        assert!((s.controls.alpha[node] - 2.0 * p).abs() < 1e-9);
    }
}

#[test]
fn blow_up_freezes_the_run() {
    let spec = builtin::model("scalar", 1, 1, &params(&[("f0", -1e9)])).unwrap();
    let grid = grid1(3, 5, 1.0, 1e-2);
    let run = solve_system(&spec, &grid, &SolverConfig::default()).unwrap();
    assert!(run.diagnostics.blowup_tripped);
    assert!(run.diagnostics.effective_horizon < 1.0);
    assert!(!run.diagnostics.warnings.is_empty());
    assert!(run.final_state().phi.sup_norm() <= 1e8);
}

#[test]
fn time_step_above_the_transport_bound_is_rejected() {
    let spec = lq(&[("r0", 50.0)]);
    let grid = grid2(6, 11, 0.1, 5e-2);
    match solve_system(&spec, &grid, &SolverConfig::default()) {
        Err(Error::Cfl { dt, dt_max }) => assert!(dt > dt_max),
        other => panic!("expected a CFL error, got {other:?}"),
    }
}

#[test]
fn runs_are_deterministic() {
    let spec = lq(&[]);
    let grid = grid2(5, 9, 0.1, 2e-3);
    let cfg = SolverConfig::default();
    let a = solve_system(&spec, &grid, &cfg).unwrap();
    let b = solve_system(&spec, &grid, &cfg).unwrap();
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    write_snapshot_csv(&grid, a.final_state(), &mut ca).unwrap();
    write_snapshot_csv(&grid, b.final_state(), &mut cb).unwrap();
    write_diagnostics_csv(&a.diagnostics, &mut ca).unwrap();
    write_diagnostics_csv(&b.diagnostics, &mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn mismatched_grid_is_rejected() {
    let spec = lq(&[]);
    let grid = grid1(5, 9, 0.1, 1e-3);
    assert!(solve_system(&spec, &grid, &SolverConfig::default()).is_err());
}
