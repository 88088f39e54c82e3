//! Few-step adversarial diffusion for multi-contrast image synthesis.
//!
//! The model denoises a target contrast in a small number of diffusive steps
//! (default 4). Each step is predicted by a dual-encoder U-Net generator: a
//! semantic encoder extracts multi-scale features from the conditioning
//! contrasts, a diffusive encoder consumes the noisy target together with
//! that guidance, an adaptive feature maximizer fuses both bottlenecks, and a
//! shared decoder with self-attention produces the clean-image estimate. A
//! time-conditioned discriminator and a feature-attentive loss (attention
//! saliency matched against a pretrained autoencoder) drive training.
//!
//! Everything runs on the CPU over `ndarray` buffers, generic over `f32`
//! (training) and `f64` (gradient checking), with deterministic seeding
//! throughout.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod training;

mod error;

pub use error::{Error, Result};
