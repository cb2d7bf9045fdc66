//! Error type shared by every module of the workbench.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid genome: {0}")]
    Genome(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("latency table has no entry for {0}")]
    Coverage(String),

    #[error("measurement unstable for {key}: dispersion {dispersion:.3} exceeds {limit}")]
    Unstable { key: String, dispersion: f64, limit: f64 },

    #[error("scaling-law fit needs more grid coverage: {0}")]
    GridCoverage(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
