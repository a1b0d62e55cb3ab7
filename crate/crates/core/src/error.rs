use std::path::PathBuf;

use thiserror::Error;
use vispromo_nn::BlobError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("missing image for item `{0}`")]
    MissingImage(String),
    #[error("cannot decode image {path}: {msg}")]
    ImageDecode { path: PathBuf, msg: String },
    #[error("dataset eliminated by filtering (core = {0})")]
    EmptyAfterFilter(usize),
    #[error("no unpopular items below popularity threshold {0}")]
    NoTargets(usize),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite loss during {stage} (step {step}): {detail}")]
    Diverged { stage: &'static str, step: usize, detail: String },
    #[error("malformed document: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Blob(#[from] BlobError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
