//! Motion diffusion engine core.
//!
//! Pipeline: BVH ingestion and canonicalization ([`bvh`], [`skeleton`]),
//! kinematic feature codec ([`features`]), text/audio conditioning
//! ([`conditioning`], [`audio`]), denoising diffusion with classifier-free
//! guidance ([`diffusion`], [`denoiser`]), long-motion composition
//! ([`doubletake`]), evaluation ([`metrics`]), and dataset assembly
//! ([`dataset`]).

pub mod audio;
pub mod bvh;
pub mod conditioning;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod doubletake;
pub mod error;
pub mod features;
pub mod math;
pub mod par;
pub mod rotation;
pub mod skeleton;

pub use error::{Error, Result};
