use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Operand shapes are incompatible for the named operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A protocol cannot run on the given data (e.g. a single-speaker LOSO).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The API was called in an unsupported way.
    #[error("usage error: {0}")]
    Usage(String),

    /// Inconsistent model or experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A text record failed to parse.
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
