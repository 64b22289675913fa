use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty sequence")]
    EmptySequence,
    #[error("id out of range: {0}")]
    IdOutOfRange(usize),
    #[error("unknown condition: {0}")]
    UnknownCondition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged")]
    TrainingDiverged,
    #[error("plugin training diverged")]
    PluginDiverged,
    #[error("plugin/pretrain mismatch (plugin expects {expected}, checkpoint is {actual})")]
    DigestMismatch { expected: String, actual: String },
    #[error("no n-grams")]
    NoNgrams,
    #[error("need at least two classes to train a classifier")]
    SingleClass,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
