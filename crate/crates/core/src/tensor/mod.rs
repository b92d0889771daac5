//! Dense tensors and reverse-mode differentiation.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{offset_index, Graph, Var};
pub use kernels::{
    activation, conv1d_zero_pad, conv2d_zero_pad, layer_norm_feature, matmul, piecewise_max_pool, sigmoid, Activation,
};
pub use scalar::{DType, Scalar};
pub use tensor::{Mask, Tensor};
