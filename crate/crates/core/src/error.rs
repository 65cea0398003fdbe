use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch (expected {expected:?}, got {got:?})")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: timestep {t} outside 1..={max}")]
    Timestep { op: &'static str, t: usize, max: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        msg: msg.into(),
    }
}

pub(crate) fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}
