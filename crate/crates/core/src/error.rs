use thiserror::Error;

use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid document: {0}")]
    Document(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("sequence of length {len} exceeds encoder max_len {max}; truncate the document or raise max_len")]
    SequenceTooLong { len: usize, max: usize },
    #[error("record {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("synthetic spec: {0}")]
    Synth(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss on document {doc_id}")]
    NonFiniteLoss { doc_id: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
