//! Diffusion-based image super-resolution with local-global context-aware
//! attention, sized to train on a CPU in minutes.
//!
//! Every computation runs in `f64` on a small reverse-mode tape ([`graph`]).
//! The pipeline is: synthesize HR/LR pairs ([`degradation`]), fold images
//! into latents ([`codec`]), train a conditioned denoiser ([`diffusion`])
//! with the composite objective ([`losses`]), sample, and score
//! ([`metrics`]). [`commands`] wires these into reproducible experiment runs.

pub mod checkpoint;
pub mod codec;
pub mod commands;
pub mod conditioning;
pub mod config;
pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod lgcaa;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
