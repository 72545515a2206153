//! Error type shared across the engine.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum HiclError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-tensor shape does not satisfy an operation's contract.
    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// A scalar hyperparameter is out of its legal range.
    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// NaN or Inf appeared where only finite values are allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A graph/tape contract was violated (e.g. backward on a non-scalar).
    #[error("autodiff contract violation: {0}")]
    Contract(String),

    /// Model or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Labels or input data violate the dataset contract.
    #[error("data error: {0}")]
    Data(String),

    /// On-disk dataset bytes do not match the expected format.
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    /// No expert can be selected (e.g. every prototype is cold).
    #[error("routing error: {0}")]
    Routing(String),

    /// Task ordering or phase rules of the continual protocol were broken.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A checkpoint could not be read, written, or matched to the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HiclError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        HiclError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HiclError>;
