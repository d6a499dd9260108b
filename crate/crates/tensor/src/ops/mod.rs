//! Forward kernels. Each is a pure function over immutable inputs.

mod activation;
mod conv;
mod linalg;
mod norm;
mod reduce;
mod resample;
mod shape;

pub use activation::{activation, sigmoid, Activation};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use linalg::{linear, matmul, softmax_lastdim};
pub use norm::{
    batch_norm, batch_norm_backward, batch_norm_forward, layer_norm_backward, layer_norm_forward, BnCache, NormMode,
    RunningStats,
};
pub use reduce::{reduce, reduce_with_argmax, Reduce};
pub use resample::{bilinear_upsample, bilinear_upsample_backward, max_pool2d_same, pixel_shuffle, pixel_unshuffle};
pub use shape::{binary, broadcast_shape, broadcast_to, concat, gather, inverse_permutation, permute, roll, sum_to, BinaryOp};

pub(crate) use linalg::{matmul_backward, softmax_backward};
pub(crate) use reduce::reduce_backward;
pub(crate) use shape::split;
