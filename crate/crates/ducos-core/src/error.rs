use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible (beyond the per-channel broadcast rule).
    ShapeMismatch(String),
    /// Operation preconditions violated (bad kernel size, empty reduction, ...).
    InvalidArgument(String),
    /// A second backward pass was requested on an already-consumed tape.
    TapeConsumed,
    /// backward() was called on a non-scalar value.
    NonScalarLoss,
    /// A loss or gradient became non-finite during training.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            CoreError::TapeConsumed => write!(f, "tape already consumed by a backward pass"),
            CoreError::NonScalarLoss => write!(f, "backward requires a scalar loss"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, CoreError>;
