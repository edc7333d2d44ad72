use super::config::ViTConfig;
use super::layers::Block;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ParamStore, Tape, Var};

/// Stack of global-attention transformer blocks.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    cfg: ViTConfig,
    blocks: Vec<Block>,
}

impl VitEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ViTConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    /// `[N, D]` to `[N, D]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], tokens: Var) -> Result<Var> {
        let want = [self.cfg.patch.num_tokens(), self.cfg.embed_dim];
        if tape.shape(tokens) != want {
            return Err(Error::shape("vit_forward", tape.shape(tokens), &want));
        }
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(tape, params, x, 1, None, None, None)?;
        }
        Ok(x)
    }
}
