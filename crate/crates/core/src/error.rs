//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on one axis.
    #[error("{op}: {axis} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// An argument violates an operation precondition.
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    /// A forward op would produce a zero-sized output.
    #[error("{op}: zero-sized output for input {h}x{w}")]
    EmptyOutput { op: &'static str, h: usize, w: usize },

    #[error("batchnorm: inference requested before running statistics were initialized")]
    UninitializedRunningStats,

    /// A gradient or loss stopped being finite; carries the offending name.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}
