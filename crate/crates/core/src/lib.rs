//! Restoration toolkit for two-photon excitation fluorescence (2PEF) imaging.
//!
//! Trains and runs two restoration methods — a per-pixel patch regressor and
//! a residual U-Net with a Laplace likelihood head — on paired
//! low-quality/high-quality acquisitions, and ships everything around them: a
//! physics-based photon-count simulator, a bit-exact image container,
//! MSE/SSIM evaluation, and a parameter/latency benchmark.

pub mod data;
pub mod error;
pub mod image;
pub mod models;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sim;
pub mod seeds;

pub use error::{Error, Result};
pub use nn::{Scalar, Tensor};
