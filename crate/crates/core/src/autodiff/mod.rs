//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Every gradient in the crate goes through here: the parameter updates of
//! the auto-encoder objectives, decoder Jacobians, and the gradient of the
//! discretized path energy with respect to path coefficients.

mod fd;
mod tape;
mod tensor;

pub use fd::finite_difference_gradient;
pub use tape::{log_sum_exp, sigmoid, Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::matmul;
