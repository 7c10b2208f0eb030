//! Dense tensors, reverse-mode autodiff and a finite-difference oracle.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_coords, finite_diff_grad, max_relative_error, relative_error};
pub use scalar::Scalar;
pub use tape::{AttnLayout, Gradients, Tape, Var};
pub use tensor::{scaled_attention, softmax_lastdim, Tensor};
