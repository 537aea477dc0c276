use serde::{Deserialize, Serialize};

use mf_core::conditioning::{CAPTION_WORDS, VOCABULARY};
use mf_core::tensor::Tensor;

use crate::DitError;

/// Extents and widths of the toy transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Video frames `N`.
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Spatial average-pool factor of the pixel encoder.
    pub pool: usize,
    /// Temporal stride of the pixel encoder; latent frames are `(N-1)/stride + 1`.
    pub stride: usize,
    /// Latent patch size.
    pub patch: usize,
    /// Model width `d`.
    pub dim: usize,
    pub heads: usize,
    /// Base transformer blocks `B`.
    pub blocks: usize,
    /// Camera-branch blocks `B_v`, feeding base blocks `0..B_v`.
    pub vcm_blocks: usize,
    pub mlp_ratio: usize,
    /// Entity label vocabulary.
    pub vocab: usize,
    pub caption_vocab: usize,
    /// Trajectory points per object `N_p`.
    pub num_points: usize,
    /// Whether guidance renders feed the camera branch. Off gives the
    /// Plücker-only variant.
    pub use_pcd: bool,
    /// Pooled pixels are mapped to latents as `(x - shift) * scale`, so
    /// the data is not swamped by unit-variance noise.
    pub latent_shift: f32,
    pub latent_scale: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 17,
            width: 64,
            height: 64,
            pool: 2,
            stride: 4,
            patch: 4,
            dim: 64,
            heads: 4,
            blocks: 4,
            vcm_blocks: 2,
            mlp_ratio: 4,
            vocab: VOCABULARY.len(),
            caption_vocab: CAPTION_WORDS.len(),
            num_points: 9,
            use_pcd: true,
            latent_shift: 0.5,
            latent_scale: 4.0,
            seed: 0,
        }
    }
}

pub const CHANNELS: usize = 3;
/// Guidance channels: RGB plus the coverage mask.
pub const GUIDANCE_CHANNELS: usize = 4;
pub const PLUCKER_CHANNELS: usize = 6;

impl ModelConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            frames: 5,
            width: 16,
            height: 16,
            patch: 4,
            dim: 16,
            heads: 2,
            blocks: 2,
            vcm_blocks: 1,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DitError> {
        let bad = |m: String| Err(DitError::Config(m));
        if [self.frames, self.width, self.height, self.pool, self.stride, self.patch, self.dim, self.heads]
            .contains(&0)
        {
            return bad("extents, factors and widths must be positive".into());
        }
        if (self.frames - 1) % self.stride != 0 {
            return bad(format!("frames - 1 = {} is not a multiple of stride {}", self.frames - 1, self.stride));
        }
        let cell = self.pool * self.patch;
        if self.width % cell != 0 || self.height % cell != 0 {
            return bad(format!(
                "{}x{} is not divisible by pool {} times patch {}",
                self.width, self.height, self.pool, self.patch
            ));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.blocks == 0 || self.vcm_blocks == 0 || self.vcm_blocks > self.blocks {
            return bad(format!("need 1 <= vcm_blocks ({}) <= blocks ({})", self.vcm_blocks, self.blocks));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite() && self.latent_shift.is_finite()) {
            return bad("latent scale must be positive and shift finite".into());
        }
        if self.mlp_ratio == 0 || self.vocab == 0 || self.caption_vocab == 0 || self.num_points == 0 {
            return bad("mlp ratio, vocabularies and point count must be positive".into());
        }
        Ok(())
    }

    pub fn latent_frames(&self) -> usize {
        (self.frames - 1) / self.stride + 1
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.pool
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.pool
    }

    /// Latent shape `[Ñ, h, w, C]`.
    pub fn latent_shape(&self) -> [usize; 4] {
        [self.latent_frames(), self.latent_height(), self.latent_width(), CHANNELS]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_height() / self.patch, self.latent_width() / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn num_tokens(&self) -> usize {
        self.latent_frames() * self.tokens_per_frame()
    }

    /// Pooled pixels to model latents.
    pub fn normalize(&self, pooled: &mut Tensor<f32>) {
        for v in pooled.data_mut() {
            *v = (*v - self.latent_shift) * self.latent_scale;
        }
    }

    /// Side of a token's footprint in input pixels.
    pub fn pixel_patch(&self) -> usize {
        self.patch * self.pool
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_extents() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.latent_frames(), 5);
        assert_eq!(c.latent_shape(), [5, 32, 32, 3]);
        assert_eq!(c.num_tokens(), 5 * 8 * 8);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_extents() {
        let c = ModelConfig {
            frames: 16,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("stride"));
        let c = ModelConfig {
            patch: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            vcm_blocks: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
