//! Error taxonomy shared across the crate.
//!
//! Every failure mode maps to a process exit code so the CLI can report
//! failures uniformly: `1` usage, `2` runtime/numeric, `3` format/version,
//! `4` theory-suite failure.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions produced by the library and CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },

    /// A square matrix was required (determinant, inverse).
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    /// `backward` was called on a non-scalar value.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// LU factorization hit a numerically zero pivot.
    #[error("{op}: singular matrix (condition estimate {cond:.3e})")]
    Singular { op: &'static str, cond: f64 },

    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A class label fell outside `[0, L)`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A numeric failure (NaN/Inf) was detected mid-computation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Command-line / configuration usage error.
    #[error("{0}")]
    Usage(String),

    /// Checkpoint carries an unsupported format version.
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    /// An IDX file starts with the wrong magic number.
    #[error("{path}: bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// An IDX file ended before the declared payload.
    #[error("{path}: truncated IDX file at byte offset {offset}")]
    IdxTruncated { path: String, offset: u64 },

    /// The image and label files disagree on the example count.
    #[error("IDX pair mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// A checkpoint array has an inconsistent shape.
    #[error("checkpoint member {member} layer {layer}: {detail}")]
    CheckpointShape {
        member: usize,
        layer: usize,
        detail: String,
    },

    /// One or more theory-suite checks failed.
    #[error("theory suite failed: {0}")]
    TheoryFailure(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed JSON in a checkpoint or result file.
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::FormatVersion { .. }
            | Error::IdxMagic { .. }
            | Error::IdxTruncated { .. }
            | Error::IdxCountMismatch { .. }
            | Error::CheckpointShape { .. }
            | Error::Json(_) => 3,
            Error::TheoryFailure(_) => 4,
            _ => 2,
        }
    }

    /// Short machine-readable code for structured error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NotSquare { .. } => "not-square",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::Singular { .. } => "singular",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Empty(_) => "empty-input",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::Numeric(_) => "numeric-failure",
            Error::Usage(_) => "usage",
            Error::FormatVersion { .. } => "format-version",
            Error::IdxMagic { .. } => "idx-magic",
            Error::IdxTruncated { .. } => "idx-truncated",
            Error::IdxCountMismatch { .. } => "idx-count-mismatch",
            Error::CheckpointShape { .. } => "checkpoint-shape",
            Error::TheoryFailure(_) => "theory-failure",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 2);
        assert_eq!(
            Error::FormatVersion {
                found: 9,
                expected: 1
            }
            .exit_code(),
            3
        );
        assert_eq!(Error::TheoryFailure("x".into()).exit_code(), 4);
        assert_eq!(
            Error::Singular {
                op: "det",
                cond: 1e18
            }
            .exit_code(),
            2
        );
    }
}
