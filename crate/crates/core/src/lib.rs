//! Post-training quantization with Hadamard rotation and channel smoothing,
//! plus noise-filtered diverse calibration sampling, on a small synthetic
//! alternating-attention transformer.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the model,
//! sampling and calibration layers work in `f64`, exposed through the aliases
//! below.

pub mod calibrate;
pub mod error;
pub mod experiment;
pub mod format;
pub mod model;
pub mod qlinear;
pub mod quantizer;
pub mod rng;
pub mod rotation;
pub mod sampling;
pub mod scalar;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type QuantLinearF64 = qlinear::QuantLinear<f64>;
pub type QuantLinearF32 = qlinear::QuantLinear<f32>;
pub type QuantizedTensorF64 = quantizer::QuantizedTensor<f64>;
