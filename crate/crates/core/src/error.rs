use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("augmentation error: {0}")]
    Augment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimizer error at step {step}: {reason}")]
    Optimizer { step: usize, reason: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("bound lab error: {0}")]
    Lab(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("ingestion error in {path} at byte offset {offset}: {reason}")]
    Ingest {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
