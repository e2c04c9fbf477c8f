mod common;

use common::*;
use major_mfg::builtin::{self, Params};
use major_mfg::oracle::{scalar_reduction_check, ReductionCase};
use major_mfg::stopping::*;
use major_mfg::*;

fn canonical_model() -> ModelSpec {
    lq(&[("s_x", 0.0), ("kappa_f", 0.1), ("q0", 1.0)])
}

#[test]
fn inactive_obstacle_reproduces_the_unstopped_run() {
    let spec = lq(&[]);
    let grid = grid2(5, 9, 0.2, 2e-3);
    let cfg = SolverConfig::default();
    let stop = builtin::stopping("inactive", &Params::new()).unwrap();
    let system = solve_system(&spec, &grid, &cfg).unwrap();
    let penalized = solve_penalized(&spec, &grid, &stop, &cfg).unwrap();
    let obstacle = solve_obstacle(&spec, &grid, &stop, &cfg, 0.0).unwrap();
    for ((a, b), c) in system.snapshots.iter().zip(&penalized.snapshots).zip(&obstacle.run.snapshots) {
        assert!(sup_gap(&a.phi.values, &b.phi.values) <= 1e-12);
        assert!(sup_gap(&a.u.values, &b.u.values) <= 1e-12);
        assert!(sup_gap(&a.phi.values, &c.phi.values) <= 1e-12);
        assert!(sup_gap(&a.u.values, &c.u.values) <= 1e-12);
        assert!(b.controls.beta.iter().all(|v| *v == 0.0));
    }
    let report = obstacle.final_report().unwrap();
    assert_eq!(report.contact_fraction(), 0.0);
    assert!(report.region_boundary_nodes.is_empty());
    assert_eq!(penalized.diagnostics.excess.iter().copied().fold(0.0, f64::max), 0.0);
}

#[test]
fn penalty_relaxation_matches_closed_form() {
    let spec = builtin::model("scalar", 1, 1, &params(&[("phi0", 1.0), ("u0", 1.0), ("b", 0.0), ("lambda", 0.0)])).unwrap();
    let stop = builtin::stopping("constant", &params(&[("epsilon", 0.1)])).unwrap();
    let grid = grid1(3, 5, 1.0, 1e-3);
    let cfg = SolverConfig::default();
    let report = scalar_reduction_check(ReductionCase::PenaltyRelaxation, &spec, &grid, Some(&stop), &cfg).unwrap();
    assert!(report.sup_error < 5e-3, "{report:?}");

    // The pointwise-implicit penalty is exactly the backward Euler recurrence.
    let mut cfg = SolverConfig::default();
    cfg.snapshot_every = 1;
    let run = solve_penalized(&spec, &grid, &stop, &cfg).unwrap();
    for (n, s) in run.snapshots.iter().enumerate() {
        let expected = (1.0_f64 + 1e-2).powi(-(n as i32));
        for (f, u) in s.phi.values.iter().zip(&s.u.values) {
            assert!((f - expected).abs() < 1e-13);
            assert!((u - expected).abs() < 1e-13);
        }
        assert!(s.controls.beta.iter().all(|b| *b == 10.0));
    }
}

#[test]
fn below_the_obstacle_the_intensity_vanishes() {
    let spec = lq(&[]);
    let grid = grid2(5, 9, 0.2, 2e-3);
    let cfg = SolverConfig::default();
    let stop = builtin::stopping("constant", &params(&[("psi0", 100.0), ("ubar0", 3.0)])).unwrap();
    let run = solve_penalized(&spec, &grid, &stop, &cfg).unwrap();
    let system = solve_system(&spec, &grid, &cfg).unwrap();
    for (s, r) in run.snapshots.iter().zip(&system.snapshots) {
        assert!(s.controls.beta.iter().all(|b| *b == 0.0));
        assert!(sup_gap(&s.u.values, &r.u.values) <= 1e-12);
    }
}

#[test]
fn obstacle_reached_everywhere_pins_the_crowd_cost() {
    // φ₀ = ψ = 0 and F ≡ -1 pushes the unconstrained step above ψ everywhere.
    let spec = builtin::model("scalar", 2, 1, &params(&[("f0", -1.0), ("b", 1.0), ("lambda", 1.0)])).unwrap();
    let stop = builtin::stopping("constant", &params(&[("psi0", 0.0), ("ubar0", 0.7)])).unwrap();
    let grid = grid2(4, 7, 0.1, 1e-2);
    let mut cfg = SolverConfig::default();
    cfg.snapshot_every = 1;
    let run = solve_obstacle(&spec, &grid, &stop, &cfg, 0.0).unwrap();
    for s in run.run.snapshots.iter().skip(1) {
        assert!(s.phi.values.iter().all(|v| *v == 0.0));
        assert!(s.u.values.iter().all(|v| *v == 0.7));
        assert!(s.controls.beta.iter().all(|b| *b == f64::INFINITY));
    }
    for r in &run.reports {
        assert_eq!(r.contact_fraction(), 1.0);
        assert_eq!(r.max_violation, 0.0);
        assert_eq!(r.max_residual_off_contact, 0.0);
    }
}

#[test]
fn canonical_obstacle_is_complementary_and_resets_the_crowd() {
    let spec = canonical_model();
    let stop = builtin::stopping("canonical", &Params::new()).unwrap();
    let grid = grid2(6, 11, 1.0, 4e-3);
    let cfg = SolverConfig::default();
    let run = solve_obstacle(&spec, &grid, &stop, &cfg, 0.0).unwrap();
    let report = run.final_report().unwrap();
    assert!(report.max_violation <= 1e-12);
    assert!(report.max_residual_off_contact <= 1e-9, "{}", report.max_residual_off_contact);
    assert!(report.contact_fraction() > 0.0 && report.contact_fraction() < 1.0);
    assert!(!report.region_boundary_nodes.is_empty());
    let s = run.run.final_state();
    let n = grid.node_count();
    for node in 0..n {
        if s.phi.values[node] == run.psi[node] {
            assert_eq!(s.u.values[node], 0.5);
            assert_eq!(s.u.values[n + node], 0.5);
            assert_eq!(s.controls.beta[node], f64::INFINITY);
        } else {
            assert!(s.phi.values[node] < run.psi[node]);
            assert_eq!(s.controls.beta[node], 0.0);
        }
    }
    let mut csv = Vec::new();
    report.write_csv(&grid, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("node,x1,x2,y1,contact,residual\n"));
    assert!(text.lines().last().unwrap().starts_with("# t=1 max_violation=0"));
}

#[test]
fn small_epsilon_penalized_run_approaches_the_obstacle() {
    let spec = canonical_model();
    let stop = builtin::stopping("canonical", &Params::new()).unwrap();
    let grid = grid2(5, 9, 1.0, 4e-3);
    let cfg = SolverConfig::default();
    let obstacle = solve_obstacle(&spec, &grid, &stop, &cfg, 0.0).unwrap();
    let mut gaps = Vec::new();
    for eps in [1e-2, 1e-3, 1e-4] {
        let run = solve_penalized(&spec, &grid, &stop.with_epsilon(eps), &cfg).unwrap();
        gaps.push(sup_gap(&run.final_state().phi.values, &obstacle.run.final_state().phi.values));
    }
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] < 5e-3, "{gaps:?}");
}

#[test]
fn intensity_is_bang_bang() {
    let spec = canonical_model();
    let stop = builtin::stopping("canonical", &Params::new()).unwrap();
    let grid = grid2(5, 9, 1.0, 4e-3);
    let mut cfg = SolverConfig::default();
    cfg.snapshot_every = 1;
    let solver = Solver::new(&spec, &grid, &cfg, Problem::Penalized(&stop)).unwrap();
    let psi = solver.psi().unwrap().to_vec();
    let mut active = 0;
    solver
        .run(&mut |s| {
            for (node, b) in s.controls.beta.iter().enumerate() {
                assert!(*b == 0.0 || *b == 100.0);
                if *b > 0.0 {
                    assert!(s.phi.values[node] > psi[node]);
                } else {
                    assert!(s.phi.values[node] - psi[node] <= cfg.tie_tol);
                }
                active += usize::from(*b > 0.0);
            }
        })
        .unwrap();
    assert!(active > 0);
}

#[test]
fn compatibility_warning_flags_an_inconsistent_post_stop_cost() {
    let cfg = SolverConfig::default();
    let grid = grid2(5, 9, 0.5, 1e-3);
    // no drift, no source, no discount: any constant Ū is stationary
    let spec = builtin::model("scalar", 2, 1, &params(&[("b", 0.0), ("lambda", 0.0)])).unwrap();
    let stop = builtin::stopping("constant", &params(&[("ubar0", 2.0)])).unwrap();
    let ok = ubar_compatibility(&spec, &grid, &stop, &cfg, 1e-8).unwrap();
    assert_eq!(ok.max_residual, 0.0);
    assert!(ok.warning.is_none());

    let spec = lq(&[]);
    let stop = builtin::stopping("canonical", &params(&[("ubar_x", 1.0)])).unwrap();
    let bad = ubar_compatibility(&spec, &grid, &stop, &cfg, 1e-8).unwrap();
    assert!(bad.max_residual > 1e-2);
    assert!(bad.warning.unwrap().contains("not compatible"));
}

#[test]
fn complementarity_residual_on_a_tiny_field() {
    let r = complementarity_residual(&[0.2, 1.0, 1.5], &[1.0, 1.0, 1.0], &[0.0, -0.3, 0.0], 1e-12);
    assert_eq!(r.contact_set, vec![false, true, false]);
    assert_eq!(r.complementarity_residual[..2], [0.0, 0.0]);
    assert_eq!(r.max_violation, 0.5);
    assert_eq!(r.max_residual_off_contact, 0.5);
}
