//! Conditional denoiser, discriminator, and the attention autoencoder used
//! for feature supervision, built from the hand-rolled layer kit.

pub mod autoencoder;
pub mod blocks;
pub mod config;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod generator;

pub use autoencoder::{AeForward, Autoencoder};
pub use config::{FmJoin, GeneratorConfig};
pub use decoder::Decoder;
pub use discriminator::Discriminator;
pub use encoder::{EncoderTower, FeatureBundle};
pub use generator::{GenForward, Generator};
