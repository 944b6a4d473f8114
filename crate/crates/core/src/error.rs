use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("every entry of a softmax slice is masked")]
    DegenerateSlice,

    #[error("vector norm below 1e-12 in {0}")]
    DegenerateVector(&'static str),

    #[error("input does not sum to 1 (got {0})")]
    NotNormalized(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument `{field}`: {msg}")]
    InvalidArgument { field: String, msg: String },

    #[error("autograd: {0}")]
    Graph(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("model is frozen: {0}")]
    Frozen(String),

    #[error("test undefined: {0}")]
    UndefinedTest(&'static str),

    #[error("unknown selector strategy `{0}`")]
    UnknownStrategy(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { field: field.into(), msg: msg.into() }
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
