use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// 1 for grayscale.
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::contract(format!("patch embedding sizes must be positive: {self:?}")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::contract(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub patch: PatchEmbedConfig,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.patch.embed_dim != self.embed_dim {
            return Err(Error::contract("patch embed_dim differs from encoder embed_dim"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::contract("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// The ViT never downsamples past its patch size.
    pub fn encoder_stride(&self) -> usize {
        self.patch.patch_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinConfig {
    pub stage_depths: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    pub window_size: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub patch: PatchEmbedConfig,
    pub encoder_stride: usize,
}

impl SwinConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.patch.embed_dim != self.embed_dim {
            return Err(Error::contract("patch embed_dim differs from encoder embed_dim"));
        }
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.heads_per_stage.len() {
            return Err(Error::contract(format!(
                "{} stage depths vs {} head counts",
                self.stage_depths.len(),
                self.heads_per_stage.len()
            )));
        }
        if self.window_size == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::contract("window_size and mlp_ratio must be positive"));
        }
        let stride = self.patch.patch_size << (self.stage_depths.len() - 1);
        if stride != self.encoder_stride {
            return Err(Error::contract(format!(
                "encoder stride {} does not match patch size {} x 2^{} = {stride}",
                self.encoder_stride,
                self.patch.patch_size,
                self.stage_depths.len() - 1
            )));
        }
        let mut grid = self.patch.grid();
        for stage in 0..self.stage_depths.len() {
            let dim = self.stage_dim(stage);
            let heads = self.heads_per_stage[stage];
            if !grid.is_multiple_of(self.window_size) {
                return Err(Error::contract(format!(
                    "stage {stage}: token grid {grid} not divisible by window {}",
                    self.window_size
                )));
            }
            if heads == 0 || !dim.is_multiple_of(heads) {
                return Err(Error::contract(format!("stage {stage}: dim {dim} not divisible by {heads} heads")));
            }
            if stage + 1 < self.stage_depths.len() {
                if !grid.is_multiple_of(2) {
                    return Err(Error::contract(format!("stage {stage}: odd grid {grid} cannot merge")));
                }
                grid /= 2;
            }
        }
        Ok(())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn out_dim(&self) -> usize {
        self.stage_dim(self.stage_depths.len() - 1)
    }

    pub fn out_grid(&self) -> usize {
        self.patch.image_size / self.encoder_stride
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn swin() -> SwinConfig {
        SwinConfig {
            stage_depths: vec![2, 2],
            heads_per_stage: vec![2, 4],
            window_size: 4,
            embed_dim: 16,
            mlp_ratio: 2.0,
            patch: PatchEmbedConfig { image_size: 64, patch_size: 4, in_channels: 1, embed_dim: 16 },
            encoder_stride: 8,
        }
    }

    #[test]
    fn desk_swin_is_valid() {
        let cfg = swin();
        cfg.validate().unwrap();
        assert_eq!(cfg.out_grid(), 8);
        assert_eq!(cfg.out_dim(), 32);
    }

    #[test]
    fn stride_mismatch_rejected() {
        let cfg = SwinConfig { encoder_stride: 32, ..swin() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("encoder stride 32"), "{err}");

        // Patch 1 with four stages gives stride 8, not 32.
        let cfg = SwinConfig {
            stage_depths: vec![2, 2, 18, 2],
            heads_per_stage: vec![4, 8, 16, 32],
            window_size: 6,
            embed_dim: 128,
            mlp_ratio: 4.0,
            patch: PatchEmbedConfig { image_size: 192, patch_size: 1, in_channels: 1, embed_dim: 128 },
            encoder_stride: 32,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn window_divisibility_names_stage() {
        let cfg = SwinConfig { window_size: 3, ..swin() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stage 0"), "{err}");
    }

    #[test]
    fn patch_counts() {
        let p = PatchEmbedConfig { image_size: 192, patch_size: 4, in_channels: 1, embed_dim: 8 };
        assert_eq!(p.num_tokens(), 2304);
        let p = PatchEmbedConfig { patch_size: 1, ..p };
        assert_eq!(p.num_tokens(), 36864);
        assert!(PatchEmbedConfig { patch_size: 5, ..p }.validate().is_err());
    }
}
