use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A feature set or design matrix would exceed its configured size cap.
    #[error("budget exceeded: {what} needs {requested}, cap is {cap}")]
    BudgetExceeded {
        what: &'static str,
        requested: u128,
        cap: u128,
    },

    #[error("no polynomial of degree <= {cap} reaches sup-error {epsilon} (best {best_error:.3e})")]
    DegreeBudget { epsilon: f64, cap: usize, best_error: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerically singular Hankel matrix at order {order} (D = {value:.3e})")]
    SingularHankel { order: usize, value: f64 },

    #[error("orthogonal polynomial cross-check failed at degree {degree}: deviation {deviation:.3e}")]
    CrossCheck { degree: usize, deviation: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    /// A binary file that is not in the expected layout.
    #[error("malformed file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Errors originating from the filesystem or from malformed input files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::File { .. } | Error::Idx(_) | Error::Format(_) | Error::Csv(_)
        )
    }
}

/// Failures while decoding IDX files. Each malformation has its own variant.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated IDX file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("IDX file has {found} payload bytes, expected {expected}")]
    TrailingData { expected: u64, found: u64 },

    #[error("IDX dimensions overflow the addressable size")]
    DimensionOverflow,

    #[error("label {label} at index {index} is outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: u8, classes: usize },

    #[error("{images} images but {labels} labels")]
    PairingMismatch { images: usize, labels: usize },
}
