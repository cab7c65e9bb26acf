//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::Conv2dParams;
pub use gradcheck::{finite_diff_grad, relative_error};
pub use tape::{sigmoid, upsample_nearest, Axes, BinaryOp, ReduceOp, Tape, Var};
pub use tensor::Tensor;

