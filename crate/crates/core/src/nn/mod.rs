//! Minimal neural-network infrastructure on top of candle tensors.
//!
//! Everything models need and nothing more: a named parameter store with
//! seeded deterministic initialization, convolution/pooling primitives
//! composed from matmul-backed ops (fast on CPU in both directions, unlike
//! the stock conv kernels), batch normalization with running statistics,
//! dense layers, and an Adam optimizer.

pub mod adam;
pub mod conv;
pub mod layers;
pub mod rng;
pub mod store;

pub use adam::{Adam, AdamConfig};
pub use conv::{
    adaptive_avg_pool2d, avg_pool2d_same_exclude_pad, conv2d, depthwise_conv2d, global_avg_pool,
    max_pool2d, Padding,
};
pub use layers::{relu6, swish, BatchNorm2d, BatchNormConfig, Conv2d, Dense, DepthwiseConv2d};
pub use rng::rng_for;
pub use store::{Init, ParamStore};
