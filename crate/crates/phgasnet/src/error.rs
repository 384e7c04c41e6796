//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Numerical-domain violations (non-physical states, degenerate boundary
/// flows) are hard errors rather than clamped values: the closure relations
/// involve logarithms and divisions that are undefined there, and silently
/// clamping would mask solver failure.
#[derive(Debug, Error)]
pub enum Error {
    /// A thermodynamic state left the validity domain (ρ ≤ 0 or e ≤ 0).
    #[error("non-physical state: {0}")]
    NonPhysicalState(String),

    /// A boundary mass flow vanished where a division by f_B is required.
    #[error("boundary degeneracy: {0}")]
    BoundaryDegeneracy(String),

    /// Invalid network topology (disconnected graph, bad degrees, …).
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    /// Invalid configuration values or inconsistent scenario data.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Newton iteration failed to converge.
    #[error("Newton iteration did not converge at t={t}: residual {residual:.3e} after {iterations} iterations")]
    NewtonDivergence {
        /// Time at which the step failed.
        t: f64,
        /// Final residual max-norm.
        residual: f64,
        /// Number of iterations performed.
        iterations: usize,
    },

    /// A linear solve failed (singular or badly conditioned matrix).
    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    /// Initial data cannot be made consistent with the algebraic constraints.
    #[error("inconsistent initial data: {0}")]
    InconsistentInitialData(String),

    /// Requested reduction rank exceeds the achievable rank.
    #[error("rank deficiency: {0}")]
    RankDeficiency(String),

    /// A reduction basis violates the compatibility conditions.
    #[error("structure violation: {0}")]
    StructureViolation(String),

    /// Quadrature-weight learning could not reach the accuracy target.
    #[error("accuracy infeasible: best achievable relative residual {best:.3e} exceeds target {target:.3e} at budget {budget}")]
    AccuracyInfeasible {
        /// Best relative residual reached.
        best: f64,
        /// Requested accuracy target.
        target: f64,
        /// Element budget that was imposed.
        budget: usize,
    },

    /// File-format violation in a stored artifact.
    #[error("format error: {0}")]
    Format(String),

    /// I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
