//! Error type shared by all modules.

use thiserror::Error;

/// Errors raised by the numerical core and the run orchestration.
#[derive(Debug, Error)]
pub enum Error {
    /// A physical parameter or input violates a documented invariant.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Configuration parsing or validation failed; every violation is listed.
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    /// Vector or matrix dimensions do not match the system.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    /// An iterative solve stopped at its iteration cap.
    #[error("iteration limit {iterations} reached with relative residual {residual:.3e}")]
    MaxIterationsExceeded { iterations: usize, residual: f64 },
    /// A non-finite value appeared inside an iterative or direct method.
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    /// Adaptive quadrature did not reach its tolerance.
    #[error("quadrature failed to converge: estimate {estimate:.6e}, error estimate {error:.3e}")]
    QuadratureFailure { estimate: f64, error: f64 },
    /// A computed noise spectrum value was negative beyond round-off.
    #[error("negative spectral value {value:.3e} (scale {scale:.3e}) at {context}")]
    NegativeSpectrum { value: f64, scale: f64, context: String },
    /// Φ(t) never reached 1 on the search interval.
    #[error("dephasing function stays below 1 up to t = {t_max:.3e} s (Φ = {phi_max:.3e})")]
    NoCrossing { t_max: f64, phi_max: f64 },
    /// A nonlinear fit failed to converge.
    #[error("fit did not converge (final residual {residual:.3e})")]
    NonConvergence { residual: f64 },
    /// The fit Jacobian lost rank.
    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),
    /// Dense reference factorization refused because the system is too large.
    #[error("dense solve cap exceeded: dimension {dim} > cap {cap}")]
    DenseCapExceeded { dim: usize, cap: usize },
    /// Filesystem or serialization failure.
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit code: 2 for configuration and input errors (including
    /// unusable paths), 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }
}

/// Convenience alias.
pub type Result<T> = std::result::Result<T, Error>;
