//! Numerical solvers for mean field games with a major player on a finite
//! crowd state space.
//!
//! The major player has state `y ∈ R^d` and value `φ(t, x, y)`; the crowd is
//! described by its unnormalized histogram `x ∈ R^k` over `k` states and by
//! the master-equation solution `U(t, x, y) ∈ R^k`. The crate integrates
//! the coupled system, its myopic (large crowd discount) reduction, and the
//! penalized and obstacle formulations of stopping by the major player, and
//! ships the sweeps and oracles used to check them.

pub mod builtin;
pub mod error;
pub mod evolution;
pub mod fixedpoint;
pub mod grid;
pub mod limits;
pub mod model;
pub mod oracle;
pub mod stopping;

pub use error::{Error, Result};
pub use evolution::{solve_myopic, solve_system, step_system, Problem, Run, RunDiagnostics, Solver, SolverConfig, SystemState};
pub use fixedpoint::{ControlFields, FixedPointOptions, NonConvergencePolicy};
pub use grid::{CrowdField, GridSpec, ScalarField};
pub use model::{ModelSpec, StoppingSpec, StructureForm, StructuredCrowdDynamics};
