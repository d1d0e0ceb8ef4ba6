//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! deliberately fine-grained so callers (and the CLI) can distinguish file
//! corruption from domain errors such as infeasible episode parameters.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure while reading or writing an artifact.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A binary artifact did not start with the expected magic bytes.
    #[error("bad magic bytes: expected {expected}")]
    BadMagic {
        /// Magic the reader was looking for (e.g. `FSET`).
        expected: &'static str,
    },

    /// A binary artifact declared a format version this build cannot read.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion {
        /// Version found in the file header.
        found: u16,
        /// Version this build understands.
        supported: u16,
    },

    /// A binary artifact ended before its declared payload was complete.
    #[error("truncated payload: needed {needed} more bytes")]
    Truncated {
        /// Number of missing bytes at the point the reader gave up.
        needed: usize,
    },

    /// The trailing CRC32 did not match the file contents.
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        /// Checksum stored in the file.
        stored: u32,
        /// Checksum recomputed over the payload.
        computed: u32,
    },

    /// A payload value was NaN or infinite where finite data is required.
    #[error("non-finite value in {context}")]
    NonFinite {
        /// Human-readable location of the offending value.
        context: &'static str,
    },

    /// An operation that requires at least one record was given none.
    #[error("empty store")]
    EmptyStore,

    /// A structural invariant of a data type was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Cosine similarity (or a pooled vector) is undefined for zero-norm input.
    #[error("zero-norm vector: cosine is undefined")]
    ZeroNorm,

    /// Two vectors or sequences that must share a dimension do not.
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch {
        /// Dimension of the first operand.
        left: usize,
        /// Dimension of the second operand.
        right: usize,
    },

    /// Two sequences that must have equal length do not.
    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch {
        /// Length of the first operand.
        left: usize,
        /// Length of the second operand.
        right: usize,
    },

    /// A matrix operation that requires entries was given a 0-sized matrix.
    #[error("empty matrix")]
    EmptyMatrix,

    /// A square matrix was required but a rectangular one was supplied.
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare {
        /// Row count of the offending matrix.
        rows: usize,
        /// Column count of the offending matrix.
        cols: usize,
    },

    /// An index referred outside the valid range of a collection.
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange {
        /// Requested index.
        index: usize,
        /// Length of the indexed collection.
        len: usize,
    },

    /// A configuration parameter failed validation.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// The store cannot support the requested episode or batch shape.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Optimization produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is non-finite")]
    Diverged {
        /// Epoch (0-based) at which the loss stopped being finite.
        epoch: usize,
    },

    /// A worker pool could not be constructed.
    #[error("thread pool error: {0}")]
    ThreadPool(String),
}
