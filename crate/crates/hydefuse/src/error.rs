//! Crate-wide error type.

use thiserror::Error;

/// Diagnostics attached to a fusion run that had to be aborted.
///
/// Carries the iteration trace and the last finite iterate so callers can
/// inspect what happened instead of getting a bare message.
#[derive(Debug, Clone)]
pub struct FusionDiagnostics {
    /// Iterations completed before the abort.
    pub iterations: usize,
    /// Per-iteration records collected up to the abort.
    pub trace: crate::fusion::FusionTrace,
    /// Last iterate with all entries finite.
    pub last_latent: nalgebra::DMatrix<f64>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("problem too large: {0}")]
    Capacity(String),

    #[error("SNR is undefined for an all-zero signal")]
    UndefinedSnr,

    #[error("iteration diverged: successive difference grew {growth:.2}x over its running minimum at iteration {}", .diagnostics.iterations)]
    Divergence {
        growth: f64,
        diagnostics: Box<FusionDiagnostics>,
    },

    #[error("non-finite value encountered at iteration {}", .diagnostics.iterations)]
    NonFinite { diagnostics: Box<FusionDiagnostics> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed container: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for shape checks; keeps call sites one line.
    pub(crate) fn dimension(
        context: &'static str,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            context,
            expected: expected.into(),
            found: found.into(),
        }
    }
}
