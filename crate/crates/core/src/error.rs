use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: duplicate instance id {id:?} on lines {first} and {second}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first: usize,
        second: usize,
    },
    #[error("invalid label {0:?}: labels must be non-empty and contain no newline")]
    InvalidLabel(String),
    #[error("requested {requested} labels but only {available} distinct labels exist")]
    NotEnoughLabels { requested: usize, available: usize },
    #[error("empty gold label set")]
    EmptyGoldSet,
    #[error("token {token} is not admissible at this step")]
    InadmissibleToken { token: u16 },
    #[error("tracker is in an inconsistent state: partial label matches no remaining gold label")]
    TrackerState,
    #[error("empty index set passed to multi-softmax")]
    EmptyIndexSet,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Overlength { len: usize, max: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("prediction references unknown instance id {0:?}")]
    UnknownInstance(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("embeddings: {0}")]
    Embeddings(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
