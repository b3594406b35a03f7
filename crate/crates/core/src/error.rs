use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("client shard is empty")]
    EmptyShard,

    #[error("no client shards supplied")]
    NoShards,

    #[error("degenerate outcome: train std(y) = {0:e}")]
    DegenerateOutcome(f64),

    #[error("dirichlet partition left an empty client after {0} redraws")]
    PartitionRetries(usize),

    #[error("divergence: client {client} round {round} step {step} has |param|_inf = {norm:e}")]
    Divergence {
        client: usize,
        round: usize,
        step: usize,
        norm: f64,
    },

    #[error("full participation violated: expected {expected} client deltas, got {got}")]
    MissingClientDelta { expected: usize, got: usize },

    #[error("{params} parameters exceed the dense-Hessian limit of {limit}")]
    SizeLimit { params: usize, limit: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
