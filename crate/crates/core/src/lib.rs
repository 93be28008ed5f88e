//! Contrastive latent diffusion prior.
//!
//! Maps a conditioning embedding (an image view or a text prompt) to a single
//! generator latent that does not depend on which camera view produced the
//! embedding. The crate covers the noise schedule, the causal-transformer
//! denoiser, the diffusion and contrastive objectives, a seeded synthetic
//! multi-view world for desk-scale runs, training with checkpoint resume,
//! guided ancestral sampling, and evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod network;
pub mod optim;
pub mod eval;
pub mod latents;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
