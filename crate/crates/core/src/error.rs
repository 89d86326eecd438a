use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid kernel {0}x{1}: kernel dimensions must be odd")]
    EvenKernel(usize, usize),

    #[error("non-finite gradient in parameter group {group} at index {index}")]
    NonFiniteGradient { group: usize, index: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("value {value} out of [0, 1] at frame {frame}, cell (row {row}, col {col})")]
    ValueOutOfRange {
        frame: usize,
        row: usize,
        col: usize,
        value: f32,
    },

    #[error("payload size mismatch in {path}: expected {expected} bytes, found {found}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("timestamps are not a valid {cadence} sequence at index {index}: {detail}")]
    Timestamps {
        cadence: &'static str,
        index: usize,
        detail: String,
    },

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("date misalignment: {0}")]
    Misaligned(String),

    #[error("no ice edge: {0}")]
    NoEdge(String),

    #[error("degenerate contour: {0}")]
    DegenerateContour(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tags an error with the protocol phase it came from.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
