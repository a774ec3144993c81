//! Bridging a frozen text encoder and a frozen diffusion denoiser with LoRA
//! deltas on both and a small feedforward adapter between them.

pub mod bridge;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod rng;
pub mod text;
pub mod train;

pub use error::{Error, Result};
