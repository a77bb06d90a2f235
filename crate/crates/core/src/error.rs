//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by samplers, solvers, quadrature, and ensemble drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// Hurst parameter outside the open interval (1/2, 1).
    #[error("hurst parameter {0} must lie in (1/2, 1)")]
    InvalidHurst(f64),

    /// Time grid with a non-positive horizon or zero steps.
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    /// Negative time passed to a covariance or kernel evaluation.
    #[error("negative time {0} outside the domain [0, inf)")]
    NegativeTime(f64),

    /// Two grid-indexed objects do not share the same grid.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Vector lengths incompatible with the grid or with each other.
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// Circulant embedding produced an eigenvalue below the hard tolerance.
    #[error(
        "circulant embedding spectrum has eigenvalue {min:.6e} below -{tol:.1e} relative to the \
         maximum {max:.6e}; grid/Hurst combination is not embeddable"
    )]
    NegativeSpectrum { min: f64, max: f64, tol: f64 },

    /// A solver produced a non-finite state.
    #[error("non-finite state {value} at step {step}")]
    NonFiniteState { step: usize, value: f64 },

    /// The first-variation exponent left the representable range.
    #[error("first-variation exponent {value:.3e} overflows at step {step}")]
    ExponentOverflow { step: usize, value: f64 },

    /// Root bracketing for the Doss–Sussmann inverse failed.
    #[error("root bracketing failed at step {step}: {reason}")]
    BracketFailure { step: usize, reason: String },

    /// Operation not defined for this model variant.
    #[error("unsupported model for this operation: {0}")]
    UnsupportedModel(&'static str),

    /// Parameter outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A convex-combination weight was negative.
    #[error("negative convex weight {0}")]
    NegativeWeight(f64),

    /// Failure while processing one ensemble path, with its index.
    #[error("path {index} failed: {source}")]
    PathFailure {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    /// I/O failure while writing outputs.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
