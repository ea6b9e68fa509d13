//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error at {source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("pointer overrun at frame {frame}: phoneme {end} of {phonemes}")]
    Overrun {
        frame: usize,
        end: usize,
        phonemes: usize,
    },

    #[error("empty utterance")]
    EmptyUtterance,

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("ambiguous codec response in row {row}")]
    DecodeAmbiguity { row: usize },

    #[error("generation fault: {0}")]
    Generation(String),

    #[error("non-finite loss at step {step}: loss_tt={loss_tt}, loss_dt={loss_dt}")]
    NonFinite { step: u64, loss_tt: f64, loss_dt: f64 },

    #[error("report error: {0}")]
    Report(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input rather than I/O or a generation fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Argument(_)
                | Error::Parse { .. }
                | Error::Validation(_)
                | Error::EmptyUtterance
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}
