//! Minimal CPU tensor engine: NCHW `f32` tensors, the layers a residual U-Net needs,
//! and hand-written backward passes for each of them.

pub mod layers;
pub mod tensor;

pub use layers::{BatchNorm2d, BnCache, Conv2d, Mode};
pub use tensor::Tensor;
