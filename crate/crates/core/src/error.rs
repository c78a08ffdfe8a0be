//! Error type shared by every module of the crate.

use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value violates a type invariant. `field` names the offending field.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    /// Malformed ATGD bytes (bad magic, unknown version, bad manifest, trailing bytes).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The byte source ended before a section was complete.
    #[error("truncated input at byte {offset}: expected {expected} bytes of {section}, found {actual}")]
    Truncated {
        offset: u64,
        section: &'static str,
        expected: u64,
        actual: u64,
    },

    /// A curve carries no positive mass where one is required.
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// The fused relevance curve is identically zero; no interval can be detected.
    #[error("interval detection failed: relevance curve has no positive value")]
    DetectionFailed,

    /// A boolean mask has no active frame to select a segment from.
    #[error("no active segment in mask")]
    NoSegment,

    /// A positive/zero-video dump pair does not line up.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// attention_ratio on a curve with zero total mass.
    #[error("attention ratio undefined: curve has zero total mass")]
    UndefinedRatio,

    /// Stage-2 samples with no local prediction to merge.
    #[error("missing local predictions for: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),

    /// Prediction and ground-truth files do not cover the same samples.
    #[error("sample id mismatch: {0}")]
    IdMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
