use std::path::PathBuf;

/// Errors raised anywhere in the captioning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Index { id: usize, size: usize },
    #[error("backward already ran on this tape; re-run the forward pass first")]
    StaleTape,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("unsupported format: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("caption {0:?} is empty after normalization")]
    EmptyCaption(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("degenerate batch: every target row is padding")]
    DegenerateBatch,
    #[error("integrity error at byte {offset}: {reason}")]
    Integrity { offset: u64, reason: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to pick a process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::NonFinite(_) | Error::DegenerateStats(_) | Error::StaleTape => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
