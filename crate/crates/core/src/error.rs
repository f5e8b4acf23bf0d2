use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("price series is empty")]
    EmptySeries,
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(String),
    #[error("invalid price series: {0}")]
    InvalidSeries(String),
    #[error("EMA span must be >= 1, got {0}")]
    InvalidSpan(usize),
    #[error("invalid window spec: {0}")]
    InvalidWindow(String),
    #[error("series has {len} points but a window needs {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("observation window is constant ({value}); sample cannot be scaled")]
    DegenerateSample { value: f64 },
    #[error("sample set is empty")]
    EmptySet,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("need {needed} synthetic samples, only {available} available")]
    InsufficientSynthetic { needed: usize, available: usize },
    #[error("window mismatch: expected length {expected}, got {got}")]
    WindowMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        what: String,
        epoch: usize,
        batch: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("samples tagged `test` must not reach training")]
    TestLeak,
    #[error("non-finite value in {0}")]
    NonFiniteInput(String),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("subsample of {n} requested but a set has only {available} samples")]
    SubsampleTooLarge { n: usize, available: usize },
    #[error("reference distances need a subsample of at least 2")]
    SingletonReference,
    #[error("test set contains synthetic samples")]
    SyntheticInTestSet,
    #[error("evaluation set is tagged `{0}`, expected `test`")]
    NotATestSet(String),
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degrees of freedom must be >= 1, got {0}")]
    InvalidDf(f64),
    #[error("window yields {got} samples, at least {needed} required")]
    InsufficientSamples { got: usize, needed: usize },
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
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

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidSpan(_) | InvalidWindow(_) | InvalidSplit(_) | InvalidConfig(_)
            | InvalidDf(_) | InvalidSpec(_) => ErrorKind::Usage,
            NonFiniteLoss { .. } | ZeroVariance => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
