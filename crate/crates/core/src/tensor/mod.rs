//! Dense tensors and reverse-mode differentiation.

mod array;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod scalar;
mod tape;

pub use array::Tensor;
pub use gradcheck::{check_gradients, grad_check};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Op, SoftmaxMask, Tape, Var};
