use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion: {0}")]
    Ingestion(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenRange { id: u32, size: usize },
    #[error("model: {0}")]
    Model(String),
    #[error("retrieval: {0}")]
    Retrieval(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    Training { epoch: usize, batch: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("syntax error at token {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("synthetic data: {0}")]
    Synth(String),
    #[error(transparent)]
    Nn(#[from] assertrag_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
