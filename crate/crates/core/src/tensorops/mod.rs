//! Dense tensors and differentiable layer primitives.

pub mod activation;
pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod shuffle;
mod tensor;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use adam::{adam_step, AdamState};
pub use conv::{conv2d, conv2d_backward, conv2d_forward, ConvCache, ConvGrads, GradRequest};
pub use layers::{Conv2d, Layer, Sequential, Trace};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
pub use tensor::{Param, Tensor};
