use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("gazetteer is empty: nothing to match")]
    EmptyGazetteer,

    #[error("{}: missing header", path.display())]
    MissingHeader { path: PathBuf },

    #[error("{}: line {line}: {message}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("span [{start}, {end}) is out of bounds for a context of {len} bytes")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },

    #[error("span [{start}, {end}) does not fall on character boundaries")]
    SpanNotCharBoundary { start: usize, end: usize },

    #[error("at least one gold answer is required")]
    NoGoldAnswers,

    #[error("at least one run is required to aggregate")]
    NoRuns,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
