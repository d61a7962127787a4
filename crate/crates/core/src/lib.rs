//! Reference-frame attention-logit modulation for image-to-video flow
//! models, on a tiny trainable spatiotemporal transformer.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod analysis;
pub mod attention;
pub mod config;
mod error;
pub mod latent;
pub mod layout;
pub mod model;
pub mod modulation;
pub mod rng;
pub mod sampler;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use latent::{Frame, VideoLatent};
pub use layout::TokenLayout;
pub use modulation::{BiasSpec, BranchPolicy, ModulationConfig, ScheduleKind};
pub use sampler::{Condition, SamplerConfig};
pub use scalar::{all_finite, Scalar};

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Latent32 = VideoLatent<f32>;
pub type Latent64 = VideoLatent<f64>;
pub type ToyDiT32 = model::ToyDiT<f32>;
pub type ToyDiT64 = model::ToyDiT<f64>;
