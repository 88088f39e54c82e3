//! Architecture configuration shared by the generator, discriminator, and
//! autoencoder. Serialized into checkpoints so a saved model can be rebuilt
//! without external context.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the feature-maximizer joins its two path outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FmJoin {
    Concat,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub in_channels_target: usize,
    pub in_channels_cond: usize,
    pub base_channels: usize,
    pub num_scales: usize,
    pub resnet_blocks_per_scale: usize,
    /// Spatial side length at which attention layers are inserted.
    pub attention_resolution: usize,
    pub time_embed_dim: usize,
    pub z_dim: usize,
    pub heads: usize,
    /// Replace the feature maximizer with a plain channel concat.
    #[serde(default)]
    pub no_fm: bool,
    /// Zero out semantic-encoder guidance inside the diffusive encoder and
    /// the decoder skips (bottleneck fusion still sees the real features).
    #[serde(default)]
    pub no_multiscale: bool,
    #[serde(default = "default_fm_join")]
    pub fm_join: FmJoin,
}

fn default_fm_join() -> FmJoin {
    FmJoin::Concat
}

impl Default for GeneratorConfig {
    /// Desk-scale defaults: 64x64 images, 3 scales, attention at side 16.
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels_target: 1,
            in_channels_cond: 2,
            base_channels: 32,
            num_scales: 3,
            resnet_blocks_per_scale: 1,
            attention_resolution: 16,
            time_embed_dim: 128,
            z_dim: 64,
            heads: 4,
            no_fm: false,
            no_multiscale: false,
            fm_join: FmJoin::Concat,
        }
    }
}

impl GeneratorConfig {
    /// Channel width at scale level `k` (0 = full resolution).
    pub fn channels_at(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Spatial side length at scale level `k`.
    pub fn side_at(&self, k: usize) -> usize {
        self.image_size >> k
    }

    /// Bottleneck level index (deepest scale).
    pub fn bottom(&self) -> usize {
        self.num_scales - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_scales == 0 {
            return fail("num_scales must be at least 1".into());
        }
        if self.image_size % (1 << (self.num_scales - 1)) != 0 {
            return fail(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                self.num_scales - 1
            ));
        }
        if self.in_channels_target == 0 || self.in_channels_cond == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.resnet_blocks_per_scale == 0 {
            return fail("need at least one block per scale".into());
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return fail(format!("time_embed_dim {} must be even and positive", self.time_embed_dim));
        }
        if self.z_dim == 0 {
            return fail("z_dim must be positive".into());
        }
        let sides: Vec<usize> = (0..self.num_scales).map(|k| self.side_at(k)).collect();
        if !sides.contains(&self.attention_resolution) {
            return fail(format!(
                "attention_resolution {} not among scale sides {:?}",
                self.attention_resolution, sides
            ));
        }
        for k in 0..self.num_scales {
            let c = self.channels_at(k);
            if c % self.heads != 0 {
                return fail(format!("channels {c} at scale {k} not divisible by {} heads", self.heads));
            }
            if c % c.min(8) != 0 {
                return fail(format!("channels {c} at scale {k} incompatible with group norm"));
            }
        }
        if self.side_at(self.bottom()) < 4 {
            return fail("bottleneck smaller than 4x4".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        let c = GeneratorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.side_at(c.bottom()), 16);
        assert_eq!(c.channels_at(2), 128);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = GeneratorConfig::default();
        c.image_size = 63;
        assert!(c.validate().is_err());

        let mut c = GeneratorConfig::default();
        c.attention_resolution = 7;
        assert!(c.validate().is_err());

        let mut c = GeneratorConfig::default();
        c.time_embed_dim = 33;
        assert!(c.validate().is_err());

        let mut c = GeneratorConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = GeneratorConfig { no_fm: true, fm_join: FmJoin::Add, ..Default::default() };
        let s = serde_json::to_string(&c).unwrap();
        let back: GeneratorConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
