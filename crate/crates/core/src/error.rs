//! Crate-wide error type.

use thiserror::Error;

use crate::optimize::RunTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input line (non-numeric token, bad index order, ...).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Feature index exceeds the declared dimension.
    #[error("line {line}: feature index {index} exceeds expected dimension {expected}")]
    Dimension {
        line: usize,
        index: usize,
        expected: usize,
    },

    /// Input stream contained no samples.
    #[error("empty input: no samples found")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The line search was handed a direction with nonnegative slope.
    #[error("not a descent direction: directional derivative at zero is {slope:e}")]
    NotDescentDirection { slope: f64 },

    /// A numeric routine produced non-finite values or an unsolvable system.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An optimizer run blew up; the partial trace is attached.
    #[error("run diverged at iteration {iter}: {msg}")]
    Diverged {
        iter: usize,
        msg: String,
        trace: Box<RunTrace>,
    },

    /// SVG/CSV rendering rejected its input.
    #[error("render error: {0}")]
    Render(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
