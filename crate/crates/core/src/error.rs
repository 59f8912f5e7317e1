//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Shapes of the operands do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value (NaN or infinity) was produced or supplied.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The inner solver produced a NaN iterate.
    #[error("solver diverged at iteration {iter}")]
    SolverDiverged { iter: usize },

    /// The orthonormalization iteration failed to contract.
    #[error("orthonormalization diverged: residual {residual:.3e} after {iters} iterations (rank-deficient input?)")]
    OrthonormalizationDiverged { residual: f64, iters: usize },

    /// A dictionary atom collapsed under projection.
    #[error("degenerate atom {index}: projected column norm {norm:.3e} below threshold")]
    DegenerateAtom { index: usize, norm: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A model or checkpoint file could not be parsed.
    #[error("model format: {0}")]
    ModelFormat(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
