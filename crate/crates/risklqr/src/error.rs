use thiserror::Error;

/// Errors produced by the synthesis, evaluation, and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A numeric routine produced an unusable result (singular solve,
    /// unstable closed loop, violated monotonicity, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A fixed-point iteration hit its cap before reaching tolerance.
    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
