//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/image geometry disagreement, naming the offending axis.
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{op}: {axis} must be even, got {value}")]
    OddDimension {
        op: &'static str,
        axis: &'static str,
        value: usize,
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("training aborted: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("batchnorm eval mode requested but running moments are uninitialized")]
    UninitializedRunningMoments,

    #[error("empty dataset: {what}")]
    EmptyDataset { what: String },

    #[error("unsupported channel count {got} (expected 1 or 2)")]
    UnsupportedChannels { got: usize },

    #[error("degenerate intensity distribution in channel {channel}: lo == hi == {value}")]
    DegenerateNormalization { channel: usize, value: f64 },

    #[error("{format}: bad magic bytes {found:?}")]
    BadMagic { format: &'static str, found: Vec<u8> },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated tensor data for \"{name}\"")]
    TruncatedTensor { name: String },

    #[error("{format}: truncated data ({detail})")]
    Truncated { format: &'static str, detail: String },

    #[error("sample value {value} exceeds {bits}-bit range at plane {channel}, index {index}")]
    SampleOutOfRange {
        value: u32,
        bits: u16,
        channel: usize,
        index: usize,
    },

    #[error("PGM: maxval must be in 1..=65535, got {0}")]
    PgmMaxval(u32),

    #[error("poisson rate {lambda:.3} at pixel ({x},{y}) channel {channel} overflows the {bits}-bit counter")]
    RateOverflow {
        lambda: f64,
        x: usize,
        y: usize,
        channel: usize,
        bits: u16,
    },

    #[error("unmatched file stems: {0}")]
    UnmatchedStems(String),

    #[error("checkpoint architecture is {found}, expected {expected}")]
    ArchMismatch {
        found: &'static str,
        expected: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            axis,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
