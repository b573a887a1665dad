//! Dense tensors and reverse-mode differentiation.

pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{gather, log_softmax, matmul, matmul_nt, relu, rms_norm, softmax};
pub use scalar::Scalar;
pub use tape::{Gradients, Slot, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for table of {bound} rows")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown slot {0}")]
    UnknownSlot(usize),
}

/// `∂loss/∂target` over a finished record.
pub fn grad_wrt<T: Scalar>(
    record: &Tape<'_, T>,
    loss: Slot,
    target: Slot,
) -> Result<Tensor<T>, NumericsError> {
    record.grad_wrt(loss, target)
}
