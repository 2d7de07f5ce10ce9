use alloc::string::String;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss is not a scalar (shape {0})")]
    NonScalarLoss(String),
    #[error("node {0} is not a parameter on this tape")]
    NotOnTape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("series too short: need at least {needed} rows, have {have}")]
    TooShort { needed: usize, have: usize },
    #[error("labels must be 0 or 1 (index {index})")]
    NonBinary { index: usize },
    #[error("no positive labels; F1 is undefined")]
    NoPositives,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(context: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        context,
        expected: alloc::format!("{expected:?}"),
        actual: alloc::format!("{actual:?}"),
    }
}
