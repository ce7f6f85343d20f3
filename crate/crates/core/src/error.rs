//! Engine error type.

use alloc::string::String;
use core::fmt;

/// Convenience alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by the engine.
///
/// Shape and geometry problems are reported eagerly (at model validation or
/// kernel entry) so that training loops never observe partially written
/// tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes or layer geometry do not line up. Carries a human
    /// readable description naming the offending dimensions.
    ShapeMismatch(String),
    /// A model-level consistency rule was violated (layer ordering,
    /// precision boundaries, trainable set, ...).
    InvalidModel(String),
    /// A scalar argument was out of its documented domain.
    InvalidArgument(String),
    /// `apply_update` was called before a full minibatch was accumulated.
    MidBatchUpdate { have: u32, need: u32 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidModel(msg) => write!(f, "invalid model: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::MidBatchUpdate { have, need } => write!(
                f,
                "update applied mid-batch: accumulated {have} of {need} samples"
            ),
        }
    }
}

impl core::error::Error for Error {}
