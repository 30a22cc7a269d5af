use thiserror::Error;

/// Failures of the pruning computations themselves (bad shapes, bad
/// parameters, missing trace components). File-level problems live in
/// [`crate::image::LoadError`] and [`crate::trace_io::FormatError`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("trace has no logits; the entropy criterion needs them")]
    MissingLogits,
    #[error("trace has no attention vectors; cannot threshold layer {layer}")]
    MissingAttention { layer: usize },
    #[error("attention vector is all zero")]
    ZeroAttention,
    #[error("negative attention weight {value} at token {index}")]
    NegativeAttention { index: usize, value: f32 },
    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn mismatch(
    what: &'static str,
    expected: impl std::fmt::Display,
    got: impl std::fmt::Display,
) -> Error {
    Error::DimensionMismatch {
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
