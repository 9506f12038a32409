use thiserror::Error;

/// Errors raised across the planning and generation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("triple {head} -[{relation}]-> {tail} violates node-kind constraints: {reason}")]
    KindMismatch {
        head: String,
        relation: String,
        tail: String,
        reason: String,
    },

    #[error("self-loop on node {0}")]
    SelfLoop(String),

    #[error("unknown node: {0}")]
    UnknownNode(String),

    #[error("unknown relation: {0}")]
    UnknownRelation(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("format version mismatch in {what}: expected {expected}, found {found}")]
    Version {
        what: String,
        expected: String,
        found: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Input validation failures, as opposed to internal faults.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
