//! Stationary second-order mean field games with no-flux boundary
//! conditions, solved as convex-analytic variational problems.
//!
//! The density `m` and momentum `w` minimize the kinetic functional
//! `∫ m H*(x, −w/m)` plus a coupling `ℱ(m)` subject to the weak
//! Fokker–Planck constraint and unit mass; the value function `u`, the
//! ergodic constant `λ` and, under a density cap `m ≤ κ`, the pressure `p`
//! are recovered as multipliers and certified a posteriori.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coupling;
pub mod discretization;
pub mod error;
pub mod fpcheck;
pub mod hamiltonian;
pub mod io;
pub mod kinetic;
mod linalg;
pub mod multipop;
pub mod solver;
pub mod verify;

pub use coupling::{check_admissibility, AdmissibilityReport, Coupling, CouplingSpec, LocalLaw};
pub use discretization::{build_operators, ConstraintOperator, DiscreteField, DiscreteVectorField, GridSpec, Norms};
pub use error::{MfgError, Result};
pub use hamiltonian::{validate_growth, CosineField, GrowthReport, HamiltonianModel, PointHamiltonian, Vec2};
pub use kinetic::{bq_value, project_onto_a, prox_bq, DualSample, KineticSample};
pub use multipop::{
    certify_populations, solve_best_response, solve_potential, BestResponseOutput, BestResponseParams, MultiPopSpec, PotentialOutput,
    SharedConstraintReport,
};
pub use solver::{forward_fp_check, solve_p1, solve_p2, Initialization, IterationRecord, SolveResult, SolverParams};
pub use verify::{certify, uniqueness_probe, AprioriBound, Problem, ProblemContext, ResidualReport, UniquenessReport};
