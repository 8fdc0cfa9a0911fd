use alloc::string::String;

use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Operand extents are incompatible with the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A documented precondition of an operation was violated.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A NaN or infinity was produced or supplied.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// The rotation estimate is too close to singular to orthonormalize.
    #[error("degenerate pose estimate, singular values {singular_values:?}")]
    DegeneratePose { singular_values: [f64; 3] },

    /// A loss term became non-finite during training.
    #[error("non-finite loss term `{term}` at epoch {epoch}")]
    NonFiniteLoss { term: &'static str, epoch: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn contract_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract {
        op,
        detail: detail.into(),
    }
}
