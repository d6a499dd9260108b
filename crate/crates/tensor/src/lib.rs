//! Dense tensors, forward kernels and a reverse-mode tape for small
//! convolutional and attention networks on the CPU.
//!
//! Image-like tensors are channels-first `[C, H, W]`.

pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod real;
mod tensor;

pub use autograd::{CustomOp, Gradients, Graph, Var};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use io::{read_gten, write_gten};
pub use real::{DType, Real};
pub use tensor::{strides_of, Tensor};
