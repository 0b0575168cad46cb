use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree on one axis of their shapes.
    #[error("{op}: {axis} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation precondition on a single tensor failed.
    #[error("{op}: {msg}")]
    BadOperand { op: &'static str, msg: String },

    /// Index outside the tensor's extent.
    #[error("{op}: index ({c}, {i}, {j}) out of range for shape {shape}")]
    IndexOutOfRange {
        op: &'static str,
        c: usize,
        i: usize,
        j: usize,
        shape: String,
    },

    /// Line-oriented text input failed to scan.
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },

    /// Input scanned but violates a field-level invariant.
    #[error("invalid {field}: {msg}")]
    Semantic { field: &'static str, msg: String },

    /// No mask in the dataset contains a qualifying object.
    #[error("empty dataset: no connected component of area >= {min_area} in any mask")]
    EmptyDataset { min_area: usize },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// Gradient probe kept returning an all-zero map.
    #[error("dead gradient at layer {layer}: all-zero input-gradient map after {retries} retries")]
    DeadGradient { layer: usize, retries: usize },

    /// ADS placement cannot be realized on this graph.
    #[error("placement mismatch: {0}")]
    Placement(String),

    /// Raster file did not parse.
    #[error("{path}: {msg} (byte offset {offset})")]
    RasterFormat {
        path: PathBuf,
        msg: String,
        offset: usize,
    },

    /// Checkpoint file did not parse or does not match the graph.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error is a numeric failure (divergence, dead gradients)
    /// as opposed to bad input data. CLI exit codes branch on this.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::DeadGradient { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
