use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed tensor file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("reserved token id {id} at codebook {book}, frame {frame}")]
    ReservedId { book: usize, frame: usize, id: u32 },

    #[error("malformed delayed grid: {0}")]
    DelayStructure(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("adaptive solver exceeded {max_evals} evaluations at tau={tau}")]
    MaxEvals {
        max_evals: usize,
        tau: f64,
        state: Vec<f32>,
    },

    #[error("sequence length {len} exceeds max_len {max_len}")]
    Overflow { len: usize, max_len: usize },

    #[error("malformed generation: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
