//! Single-stage 3D generation by multi-view diffusion: a transformer denoiser
//! reconstructs a triplane NeRF from noisy posed views and renders it back to
//! produce the denoised images.

pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod nerf;
pub mod params;
pub mod training;

pub use error::{Error, Result};
