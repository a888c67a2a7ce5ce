use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {context} (parameter index {index})")]
    NonFinite { context: String, index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("wav error in {path}: {kind}")]
    Wav { path: PathBuf, kind: WavError },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("missing upstream stage `{stage}`: {detail}")]
    MissingStage { stage: String, detail: String },
    #[error("unknown symbol `{0}` (not in vocabulary)")]
    UnknownSymbol(String),
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum WavError {
    #[error("not a RIFF/WAVE file")]
    NotRiff,
    #[error("truncated header")]
    Truncated,
    #[error("expected mono audio, found {0} channels")]
    MultiChannel(u16),
    #[error("expected 16-bit PCM, found format tag {format} with {bits} bits per sample")]
    NotPcm16 { format: u16, bits: u16 },
    #[error("missing `{0}` chunk")]
    MissingChunk(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
