//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: dimension mismatch, lhs shape {lhs:?} vs rhs shape {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("{what}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("gate values inconsistent with sigmoid(V W_g): max deviation {max_dev:e}")]
    GateInconsistent { max_dev: f64 },

    #[error("{0}: selection is empty")]
    EmptySelection(&'static str),

    #[error("{0}: distribution is degenerate (zero variance)")]
    DegenerateDistribution(&'static str),

    #[error("no calibrated range for activation site `{0}`")]
    MissingRange(String),

    #[error("non-finite values in {context}; affected tensors: {tensors:?}")]
    NonFinite {
        context: String,
        tensors: Vec<String>,
    },

    #[error("checkpoint/config mismatch in fields: {fields:?}")]
    CheckpointMismatch { fields: Vec<String> },

    #[error("corpus ingestion: {0}")]
    Ingestion(String),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
