use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("graph is not connected")]
    Disconnected,
    #[error("mixing scheme mismatch: {0}")]
    SchemeMismatch(String),
    #[error("mixing matrix violates the spectral assumption: {0}")]
    AssumptionViolation(String),
    #[error("linear solve failed: {0}")]
    Solver(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("sample id {id} outside shard of node {node} (size {size})")]
    ShardViolation { node: usize, id: usize, size: usize },
    #[error("shape mismatch: expected {expected}, got {got} ({what})")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("divergence at iteration {iteration}: non-finite value in {what}")]
    Divergence {
        iteration: usize,
        what: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
