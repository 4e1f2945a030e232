//! Learned image codec built around a gated, blind-spot-free 3D context model
//! with embedded hyperpriors.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. It provides:
//!
//! * [`tensor`] / [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! * [`layers`]: GDN/IGDN, PReLU, convolutions and the GDN residual block.
//! * [`context`]: the three-stack gated masked 3D context model, with a
//!   serial decoder that reproduces the parallel predictor bit for bit.
//! * [`entropy`]: factorized and conditional Gaussian entropy models.
//! * [`rangecoder`]: a 32-bit carry-less range coder over 16-bit CDFs.
//! * [`codec`]: analysis/synthesis transforms, hyper transforms, the
//!   compensation network and the full `compress`/`decompress` pipeline.
//! * [`metrics`]: MSE, PSNR, SSIM and differentiable MS-SSIM.
//! * [`train`]: the rate-distortion loss, Adam and per-image gradients.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod bitstream;
pub mod codec;
pub mod context;
pub mod entropy;
mod error;
pub mod layers;
pub mod math;
pub mod metrics;
pub mod params;
pub mod rangecoder;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
