//! Conditional denoising diffusion for infrared small-target segmentation.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod infer;
pub mod error;
pub mod liw;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
