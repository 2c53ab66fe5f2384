//! Error type shared by all core operations.

use alloc::string::String;
use core::fmt;

/// Failure modes of tensor and model operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Operand shapes are incompatible with the operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A scalar parameter is outside its legal range.
    InvalidParam { op: &'static str, detail: String },
    /// An index (e.g. a class label) is out of range.
    IndexOutOfRange { op: &'static str, detail: String },
    /// An operation contract was violated (e.g. backward on a non-scalar).
    Contract { op: &'static str, detail: String },
    /// A value that must be finite is NaN or infinite.
    NonFinite { op: &'static str },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            CoreError::InvalidParam { op, detail } => {
                write!(f, "{op}: invalid parameter: {detail}")
            }
            CoreError::IndexOutOfRange { op, detail } => {
                write!(f, "{op}: index out of range: {detail}")
            }
            CoreError::Contract { op, detail } => {
                write!(f, "{op}: contract violation: {detail}")
            }
            CoreError::NonFinite { op } => write!(f, "{op}: non-finite value"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
