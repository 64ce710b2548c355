//! Echocardiography dehazing with a diffusion prior.
//!
//! The crate is organised around a small set of building blocks:
//!
//! * [`raster`] — single-channel `f32` images and their binary file format.
//! * [`phantom`] — synthetic cardiac phantoms (clean/hazy pairs with masks).
//! * [`segmentation`] — ventricle/septum segmentation and the per-pixel
//!   precision maps derived from it.
//! * [`nn`] — a minimal reverse-mode autodiff tape plus the U-Net denoiser
//!   and segmentation network built on it.
//! * [`diffusion`] — noise schedule, denoising score matching training and
//!   unconditional sampling.
//! * [`sampler`] — the guided deterministic sampler that actually dehazes.
//! * [`metrics`] — contrast, distribution and distributional-distance
//!   metrics plus the blended quality score.
//! * [`pipeline`] — config parsing, batch jobs and random search.

pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod sampler;
pub mod segmentation;

pub use error::{Error, Result};
pub use raster::Raster;
