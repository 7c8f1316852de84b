use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("patch centred at ({x}, {y}) exceeds the {width}x{height} slide")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("negative count {value} at spot {spot}, gene {gene}")]
    NegativeCount { spot: usize, gene: usize, value: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite input in {0}")]
    NonFiniteInput(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("need at least 2 pairs to split, got {0}")]
    TooFewPairs(usize),

    #[error("K = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("T = {t} outside 1..={d}")]
    TOutOfRange { t: usize, d: usize },

    #[error("bank was built with encoder {bank}, query encoder is {query}")]
    FingerprintMismatch { bank: String, query: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {context}", file.display())]
    Parse { file: PathBuf, context: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(file: impl Into<PathBuf>, context: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            context: context.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Process exit code for the command-line front end: 3 for numeric
    /// failures during optimisation, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::NonFiniteInput(_) => 3,
            _ => 2,
        }
    }
}
