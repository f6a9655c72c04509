//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The primitive set is exactly what an MLP classifier and its attacks need:
//! matmul, transpose, broadcast add, relu, scale, mean, per-row softmax
//! cross-entropy and per-row KL divergence. ReLU's subgradient at 0 is 0.

mod gradcheck;
pub(crate) mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, CheckReport, Coordinate, RELATIVE_ERROR_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
