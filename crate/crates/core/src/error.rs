use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown symbol id {0}")]
    UnknownSymbol(u32),

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),

    #[error("utterance `{0}` has no transcript")]
    MissingTranscript(String),

    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("config hash mismatch: checkpoint was written for a different model configuration")]
    ConfigHashMismatch,

    #[error("unsupported {what} version {found} (supported: {supported})")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("missing {what} for utterance `{utterance}`: {path}")]
    MissingFile {
        what: &'static str,
        utterance: String,
        path: PathBuf,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
