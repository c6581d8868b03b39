//! Multi-view diffusion editing at desk scale.
//!
//! A single edited reference view is propagated to every other view of a
//! scene by a small multi-view transformer denoiser that reads source
//! views, the reference view and noisy targets as one token sequence, with
//! separate low-rank adapters for source and reference tokens.

pub mod codec;
pub mod config;
pub mod datapipe;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod lora;
pub mod params;
pub mod scalar;
pub mod scene;
pub mod tensor_io;
pub mod training;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type CameraPose32 = geometry::CameraPose<f32>;
pub type CameraPose64 = geometry::CameraPose<f64>;
pub type LatentGrid32 = codec::LatentGrid<f32>;
pub type LatentGrid64 = codec::LatentGrid<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
