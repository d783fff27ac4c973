//! Minimal differentiable operator set.

pub mod ops;
mod tensor;

pub use ops::{
    batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, dense, dense_backward,
    global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, BnMode, ConvGeometry, BN_EPS, L2_EPS,
};
pub use tensor::{Real, Tensor};
