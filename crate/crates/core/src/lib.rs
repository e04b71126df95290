//! Lightweight multiscale semantic scene completion.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – a small reverse-mode differentiable tensor kernel with the
//!   handful of operators the network needs, plus Adam.
//! * [`voxel`] – occupancy/label grids, their on-disk formats, ground-truth
//!   pooling, class weights, augmentation and point-cloud voxelization.
//! * [`model`] – the 2D UNet backbone with 3D segmentation heads, parameter
//!   and FLOP counters, and checkpoints.
//! * [`train`] – multiscale losses, the training loop, metrics and the
//!   latency benchmark.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pick the build-time default.

pub mod error;
pub mod model;
mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default element type: `f32`, or `f64` with the `f64` feature.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
