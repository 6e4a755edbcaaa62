//! Dual-frequency learned image codec for screen content.
//!
//! The crate is organised bottom-up:
//!
//! * [`autograd`], [`tensor`], [`params`]: a small reverse-mode autodiff
//!   engine generic over [`Scalar`] (`f32` for training and coding, `f64`
//!   for gradient checks).
//! * [`frequency`], [`nonlinear`], [`attention`]: the octave residual
//!   transforms, multi-scale residual blocks / GDN, and window attention.
//! * [`network`]: analysis/synthesis and hyper transforms assembled into a
//!   full codec model with checkpointing.
//! * [`entropy`]: quantisation, factorized and conditional Gaussian entropy
//!   models with a masked-convolution context model, a 32-bit range coder
//!   and the `.omr` bitstream container.
//! * [`training`], [`evaluation`], [`dataset`]: RD optimisation, PSNR /
//!   bpp / BD-rate measurement, ablations and dataset ingestion.

pub mod attention;
pub mod autograd;
pub mod dataset;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod frequency;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod nonlinear;
pub mod params;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type OmrNet32 = network::OmrNet<f32>;
pub type OmrNet64 = network::OmrNet<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
