//! U-shaped noise predictor `ε_θ(z_t, t, prompt)` with hookable attention.

mod attention;
mod unet;

pub use attention::{
    AttentionHook, AttentionKind, AttentionRecord, HookAction, IdentityHook, Site, StepInfo,
};
pub use unet::{Denoiser, LayerInfo};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; level `i` runs at
    /// `image_size >> i`.
    pub channel_mult: Vec<usize>,
    /// Resolutions that carry attention. The lowest level's is the
    /// bottleneck, which gets a pure cross-attention layer as well.
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            in_channels: 3,
            base_channels: 16,
            channel_mult: vec![1, 2, 2],
            attention_resolutions: vec![16, 8],
            heads: 2,
            head_dim: 32,
            time_dim: 64,
            text_dim: crate::text::TEXT_DIM,
            vocab_size: crate::text::Vocabulary::default().len(),
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    /// A very small network for fast tests.
    pub fn tiny() -> Self {
        DenoiserConfig {
            image_size: 8,
            base_channels: 4,
            channel_mult: vec![1, 2],
            attention_resolutions: vec![4],
            heads: 2,
            head_dim: 4,
            time_dim: 8,
            text_dim: 8,
            norm_groups: 2,
            ..DenoiserConfig::default()
        }
    }

    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channel_mult.len())
            .map(|i| self.image_size >> i)
            .collect()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mult
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() {
            return Err(Error::Config("at least one resolution level is required".into()));
        }
        let levels = self.channel_mult.len();
        if self.image_size % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "image size {} does not halve {} times",
                self.image_size,
                levels - 1
            )));
        }
        let res = self.resolutions();
        if let Some(r) = self
            .attention_resolutions
            .iter()
            .find(|r| !res.contains(r))
        {
            return Err(Error::Config(format!(
                "attention resolution {r} is not one of the level resolutions {res:?}"
            )));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("attention needs heads and head_dim > 0".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        for c in self.level_channels() {
            if c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "{c} channels do not split into {} norm groups",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        DenoiserConfig::default().validate().unwrap();
        DenoiserConfig::tiny().validate().unwrap();
    }

    #[test]
    fn attention_resolution_must_exist() {
        let cfg = DenoiserConfig {
            attention_resolutions: vec![12],
            ..DenoiserConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
