use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch { expected: [usize; 3], actual: [usize; 3] },

    #[error("empty mask for {0}")]
    EmptyMask(String),

    #[error("missing mask channel `{organ}` for {record}")]
    MissingMask { organ: String, record: String },

    #[error("series {0} has no Sim record")]
    MissingSim(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimization failed to converge after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
