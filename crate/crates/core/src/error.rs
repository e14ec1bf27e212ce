use thiserror::Error;

/// Errors raised by the solver library.
///
/// Non-convergence of an iterative solve is not an error: results carry a
/// `converged` flag and the residuals reached, see [`crate::solver::SolveResult`].
#[derive(Debug, Error)]
pub enum MfgError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("projection onto the dual constraint set did not converge in {iterations} iterations (residual {residual:e})")]
    ProjectionIterationLimit { iterations: usize, residual: f64 },

    #[error("subgradient undefined: b_q is +inf at m={m:e}, |w|={w_norm:e}")]
    OutsideDomain { m: f64, w_norm: f64 },

    #[error("linear solver failure: {0}")]
    LinearSolver(String),

    #[error("density bound is infeasible: {0}")]
    InfeasibleKappa(String),

    #[error("step-size backtracking exhausted (step {step:e}); the Lipschitz hint is far too small")]
    StepSizeFailure { step: f64 },

    #[error("forward Fokker-Planck fixed point stalled after {iterations} iterations (last change {change:e})")]
    FixedPointStalled { iterations: usize, change: f64 },

    #[error("solver stopped after {iterations} iterations without meeting tolerances (kkt residual {kkt:e})")]
    NotConverged { iterations: usize, kkt: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed field file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, MfgError>;
