//! Dense tensors, primitive kernels, and reverse-mode gradients.

mod finite_diff;
pub mod ops;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error};
pub use ops::{gelu, layer_norm, linear, matmul, softmax_rows};
pub use tape::{Fault, Gradients, RowGroups, Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;
