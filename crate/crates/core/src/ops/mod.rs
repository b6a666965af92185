//! Forward and backward kernels. Every function here is pure: inputs are
//! borrowed immutably and results are freshly allocated.

mod conv;
#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod direct;
mod elementwise;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_param_grads, ConvGrads, ConvParams};
pub use elementwise::{add, add_backward, relu, relu_backward, upsample_nearest, upsample_nearest_backward};
