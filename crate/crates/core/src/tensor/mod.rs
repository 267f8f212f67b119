//! Dense tensors and a define-by-run reverse-mode autodiff tape.

mod dense;
mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_inputs};
pub use scalar::Scalar;
pub use tape::{OpKind, Tape, Var};
