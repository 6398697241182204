//! Dense 2-D tensors, a seeded RNG, and a reverse-mode gradient tape.
//!
//! The tape is the only differentiation mechanism in the crate: every
//! forward operation that should receive gradients is recorded as a node,
//! and [`Tape::backward`] replays the record in reverse. There is no
//! broadcasting layer and no view machinery; operations that need per-row
//! scalars take an explicit column tensor.

mod rng;
mod tape;
mod tensor;

pub use rng::SeededRng;
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor2D;

use std::error::Error;
use std::fmt;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Two operands disagree on the dimensions an operation requires.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A flat buffer does not hold `rows * cols` elements.
    DataLength {
        rows: usize,
        cols: usize,
        got: usize,
    },
    /// An operation that requires a 1x1 tensor received something larger.
    NotScalar { rows: usize, cols: usize },
    /// A row index is outside the tensor.
    RowOutOfBounds { index: usize, rows: usize },
    /// A probability parameter is outside its valid range.
    InvalidProbability { p: f64 },
    /// Row-wise normalization hit a row with zero norm.
    ZeroNormRow { row: usize },
    /// The tape has already been consumed by `backward`.
    TapeConsumed,
    /// An operation received no inputs.
    EmptyInput { op: &'static str },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            NumericsError::DataLength { rows, cols, got } => write!(
                f,
                "buffer of {got} elements cannot form a {rows}x{cols} tensor"
            ),
            NumericsError::NotScalar { rows, cols } => {
                write!(f, "expected a 1x1 scalar tensor, got {rows}x{cols}")
            }
            NumericsError::RowOutOfBounds { index, rows } => {
                write!(f, "row index {index} out of bounds for {rows} rows")
            }
            NumericsError::InvalidProbability { p } => {
                write!(f, "probability {p} outside [0, 1)")
            }
            NumericsError::ZeroNormRow { row } => {
                write!(f, "cannot normalize row {row}: zero norm")
            }
            NumericsError::TapeConsumed => {
                write!(f, "tape already consumed by backward; build a new tape")
            }
            NumericsError::EmptyInput { op } => write!(f, "{op}: no inputs given"),
        }
    }
}

impl Error for NumericsError {}
