use std::path::PathBuf;

use rasm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: unrecognized or malformed image data: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: unsupported bit depth ({detail})", path.display())]
    UnsupportedBitDepth { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
