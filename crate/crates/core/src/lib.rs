//! Hyperspectral image dehazing with window-partitioned selective state
//! space blocks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation.
//! - [`ssm`]: discretization and the selective scan recurrence.
//! - [`wssm`]: window partition/reverse around a gated Mamba block.
//! - [`network`]: DehazeMamba layers, residual blocks and the full model.
//! - [`checkpoint`]: versioned parameter bundles.
//! - [`cube`], [`haze`]: hyperspectral cubes, the `HSC1` file format and the
//!   synthetic haze pipeline.
//! - [`metrics`]: SSIM, PSNR, UQI, SAM and average gradient.
//! - [`train`]: Adam, cosine annealing and the training loop.

pub mod checkpoint;
pub mod cube;
pub mod error;
pub mod haze;
pub mod metrics;
pub mod network;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod wssm;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
