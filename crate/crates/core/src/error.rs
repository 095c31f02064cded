//! Crate-wide error type.

use thiserror::Error;

use crate::kernels::KernelFamily;

/// Errors surfaced by the fusion library.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix failed orthonormality or determinant validation.
    #[error("not a rotation matrix: |R'R - I|_F = {orthogonality:.3e}, det = {determinant:.6}")]
    NotARotation {
        orthogonality: f64,
        determinant: f64,
    },

    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    /// The requested operation is only defined for some kernel families.
    #[error("kernel family {family} is not supported here")]
    UnsupportedKernel { family: KernelFamily },

    #[error("{context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    /// The noise-augmented Gram matrix stayed indefinite through every
    /// jitter level.
    #[error("Cholesky factorization of the {size}x{size} system failed after jitter up to {max_jitter:.3e}")]
    FactorizationFailure { size: usize, max_jitter: f64 },

    #[error("batch fusion over {frames} frames exceeds the cap of {cap}; use online fusion for long sequences")]
    BatchCapExceeded { frames: usize, cap: usize },

    #[error("innovation variance {value:.6e} is not positive")]
    NonpositiveInnovation { value: f64 },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("no valid pixels under the joint mask")]
    NoValidPixels,

    #[error("tensor format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable discriminant, used by the CLI error envelope.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotARotation { .. } => "not_a_rotation",
            Error::InvalidKernel(_) => "invalid_kernel",
            Error::UnsupportedKernel { .. } => "unsupported_kernel",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::FactorizationFailure { .. } => "factorization_failure",
            Error::BatchCapExceeded { .. } => "batch_cap_exceeded",
            Error::NonpositiveInnovation { .. } => "nonpositive_innovation",
            Error::InvalidRange(_) => "invalid_range",
            Error::NoValidPixels => "no_valid_pixels",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
