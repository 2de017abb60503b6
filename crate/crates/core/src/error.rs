//! Error types shared across the solver stack.
//!
//! Variants are grouped by how callers should react. `InvalidInput` and
//! `UnsupportedInput` mean the request itself is malformed and retrying is
//! pointless. The remaining variants describe numerical trouble on a valid
//! request: a solver that ran out of iterations, a sweep with too many bad
//! points, or a recovered density that fails its sanity checks.

use thiserror::Error;

/// Diagnostic record for a single grid point that failed to converge.
#[derive(Debug, Clone)]
pub struct PointDiagnostic {
    /// Index of the point in grid order.
    pub index: usize,
    /// Spectral argument at that point.
    pub z: num_complex::Complex64,
    /// Final residual norm when the solver gave up.
    pub residual: f64,
    /// Iterations spent on the point.
    pub iterations: usize,
}

/// Unified error type for the spectral solvers and their drivers.
#[derive(Debug, Error)]
pub enum SpectralError {
    /// The request is malformed (wrong shapes, out-of-range parameters,
    /// inconsistent lengths). Maps to CLI exit code 3.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The request is well formed but describes a case the implementation
    /// deliberately does not handle. Maps to CLI exit code 3.
    #[error("unsupported input: {0}")]
    UnsupportedInput(String),

    /// A linear solve or factorization failed in a way that cannot be
    /// retried (singular regularized Jacobian, failed eigensolve).
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// An iterative solver exhausted its budget without reaching tolerance.
    #[error("solver did not converge: {0}")]
    Unconverged(String),

    /// More than the tolerated fraction of grid points failed to converge.
    #[error("sweep failed: {failed} of {total} grid points unconverged")]
    SweepFailure {
        failed: usize,
        total: usize,
        details: Vec<PointDiagnostic>,
    },

    /// An unconverged point sits on the grid boundary, where gap
    /// interpolation would silently turn into extrapolation.
    #[error("unconverged point on grid boundary at index {index} (z = {z})")]
    BoundaryExtrapolation {
        index: usize,
        z: num_complex::Complex64,
    },

    /// A recovered density integrates far from 1 before normalization,
    /// indicating a wrong branch or a badly calibrated grid.
    #[error("suspicious density ({context}): pre-normalization integral {integral:.6} outside [0.5, 1.5]")]
    SuspiciousDensity { integral: f64, context: String },

    /// Signal propagation blew past the overflow guard.
    #[error("signal variance diverged at layer {layer}: q = {value:.3e}")]
    Divergence { layer: usize, value: f64 },

    /// Filesystem or serialization trouble while writing outputs.
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SpectralError {
    fn from(e: std::io::Error) -> Self {
        SpectralError::Io(e.to_string())
    }
}

impl From<csv::Error> for SpectralError {
    fn from(e: csv::Error) -> Self {
        SpectralError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SpectralError {
    fn from(e: serde_json::Error) -> Self {
        SpectralError::Io(e.to_string())
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SpectralError>;

impl SpectralError {
    /// True for errors caused by the request itself rather than by the
    /// numerics (CLI exit code 3 rather than 2).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            SpectralError::InvalidInput(_) | SpectralError::UnsupportedInput(_)
        )
    }
}
