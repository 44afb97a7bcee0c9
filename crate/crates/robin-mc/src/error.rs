//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("cannot project a strictly interior point to the boundary (signed distance {signed_distance:.3e})")]
    InteriorProjection { signed_distance: f64 },

    #[error("inward normal undefined: {0}")]
    NormalUndefined(String),

    #[error("point is not on the boundary (signed distance {signed_distance:.3e})")]
    NotOnBoundary { signed_distance: f64 },

    #[error("coefficient matrix is not symmetric at x = {at:?} (max |a_ij - a_ji| = {max_asymmetry:.3e})")]
    AsymmetricCoefficient { at: Vec<f64>, max_asymmetry: f64 },

    #[error("coefficient matrix 2a(x) is not positive definite at x = {at:?}")]
    NotPositiveDefinite { at: Vec<f64> },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("estimator requires at least one path")]
    ZeroPaths,

    #[error("NaN propagated from {source_name} at point {at:?}")]
    PropagatedNan { source_name: &'static str, at: Vec<f64> },

    #[error("boundary grid too sparse: contact point {contact:?} has no boundary grid point within {max_distance:.3e}")]
    InsufficientBoundaryGrid { contact: Vec<f64>, max_distance: f64 },

    #[error("linear solver stalled: relative residual {residual:.3e} after {iterations} iterations")]
    SolverStalled { residual: f64, iterations: usize },

    #[error("calibration bracket [{lo}, {hi}] does not change sign")]
    CalibrationBracketFailure { lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
