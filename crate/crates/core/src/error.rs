use thiserror::Error;

pub type Result<T> = std::result::Result<T, DsgError>;

/// Binary file decoding failures. Every variant names the byte offset at
/// which decoding stopped.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} at byte {offset} (expected {expected})")]
    VersionMismatch { offset: u64, expected: u32, found: u32 },
    #[error("unsupported format variant flags {flags:#x} at byte {offset}")]
    UnsupportedVariant { offset: u64, flags: u32 },
    #[error("truncated payload: needed {needed} bytes at byte {offset}, file has {available}")]
    Truncated { offset: u64, needed: u64, available: u64 },
    #[error("crc mismatch at byte {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { offset: u64, stored: u32, computed: u32 },
    #[error("invalid layout at byte {offset}: {reason}")]
    InvalidLayout { offset: u64, reason: String },
    #[error("{count} trailing bytes after crc at byte {offset}")]
    TrailingBytes { offset: u64, count: u64 },
}

impl FormatError {
    pub fn offset(&self) -> u64 {
        match self {
            FormatError::BadMagic { .. } => 0,
            FormatError::VersionMismatch { offset, .. }
            | FormatError::UnsupportedVariant { offset, .. }
            | FormatError::Truncated { offset, .. }
            | FormatError::CrcMismatch { offset, .. }
            | FormatError::InvalidLayout { offset, .. }
            | FormatError::TrailingBytes { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Error)]
pub enum DsgError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("sequence {tag:?}: {source}")]
    Sequence {
        tag: String,
        #[source]
        source: Box<DsgError>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DsgError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DsgError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DsgError::Config(msg.into())
    }

    /// Strips `Sequence` wrappers.
    pub fn root(&self) -> &DsgError {
        match self {
            DsgError::Sequence { source, .. } => source.root(),
            other => other,
        }
    }
}
