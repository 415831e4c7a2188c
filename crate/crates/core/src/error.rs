use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: &'static str },

    #[error("Riccati iteration did not converge after {iterations} iterations (last relative change {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("replay window [{record_start}, {record_end}) is not fully recorded at step {attack_start}")]
    ReplayWindow {
        record_start: usize,
        record_end: usize,
        attack_start: usize,
    },

    #[error("tie-line graph is disconnected")]
    DisconnectedGrid,

    #[error("no destabilizing scaling found in [{lo}, {hi}]")]
    NoDestabilizingScaling { lo: f64, hi: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
