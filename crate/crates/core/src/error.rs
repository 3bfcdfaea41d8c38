use alloc::string::String;
use core::fmt;

/// Errors produced by the numeric, model and training layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up. Shapes are `(rows, cols)`.
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// An operation that needs at least one row got none.
    EmptyInput { op: &'static str },
    /// A value that must be finite was NaN or infinite.
    NonFinite { what: &'static str },
    /// Token id outside the vocabulary.
    TokenOutOfRange { token: usize, vocab: usize },
    /// Sequence longer than the position table.
    SequenceTooLong { len: usize, max_len: usize },
    /// Configuration rejected before any work was done.
    InvalidConfig(String),
    /// Training produced a non-finite loss.
    Divergence { step: usize, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::EmptyInput { op } => write!(f, "{op}: empty input"),
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocabulary of {vocab}")
            }
            Error::SequenceTooLong { len, max_len } => {
                write!(f, "sequence of length {len} exceeds max_len {max_len}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step} (loss = {loss})")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
