//! Shared error type for the core crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("vocabulary error: unknown token `{0}`")]
    Vocabulary(String),

    #[error("classifier error: {0}")]
    Classifier(String),

    #[error("expansion error: duplicate class id {0}")]
    Expansion(u32),

    #[error("capacity error: {targets} targets exceed {queries} queries")]
    Capacity { targets: usize, queries: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("access violation: step {step} tried to read sample {sample_id} from outside its view")]
    AccessViolation { step: usize, sample_id: u64 },

    #[error("resume error: {0}")]
    Resume(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, CoreError>;
