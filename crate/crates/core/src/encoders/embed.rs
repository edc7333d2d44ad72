use std::sync::Arc;

use super::config::PatchEmbedConfig;
use super::layers::{Linear, INIT_STD};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Non-overlapping patch projection, with an optional learned absolute
/// position embedding (ViT only).
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    cfg: PatchEmbedConfig,
    proj: Linear,
    position: Option<ParamId>,
    index: Arc<Vec<usize>>,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &PatchEmbedConfig,
        with_position: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let flat = cfg.in_channels * p * p;
        let proj = Linear::new(store, &format!("{name}.proj"), flat, cfg.embed_dim, true, rng);
        let position = with_position.then(|| {
            store.add(
                format!("{name}.position"),
                Tensor::trunc_normal(&[cfg.num_tokens(), cfg.embed_dim], INIT_STD, rng),
            )
        });
        let (s, g) = (cfg.image_size, cfg.grid());
        let mut index = Vec::with_capacity(cfg.num_tokens() * flat);
        for gr in 0..g {
            for gc in 0..g {
                for c in 0..cfg.in_channels {
                    for i in 0..p {
                        let row = c * s * s + (gr * p + i) * s + gc * p;
                        index.extend(row..row + p);
                    }
                }
            }
        }
        Ok(Self { cfg: cfg.clone(), proj, position, index: Arc::new(index) })
    }

    pub fn config(&self) -> &PatchEmbedConfig {
        &self.cfg
    }

    pub fn position(&self) -> Option<ParamId> {
        self.position
    }

    /// `[C, H, W]` image to `[N, D]` tokens (no position term).
    pub fn forward(&self, tape: &mut Tape, params: &[Var], img: Var) -> Result<Var> {
        let c = &self.cfg;
        let want = [c.in_channels, c.image_size, c.image_size];
        if tape.shape(img) != want {
            return Err(Error::shape("patch_embed", tape.shape(img), &want));
        }
        let flat = c.in_channels * c.patch_size * c.patch_size;
        let patches = tape.gather(img, self.index.clone(), &[c.num_tokens(), flat])?;
        self.proj.forward(tape, params, patches)
    }

    /// Adds the position embedding if this embed has one.
    pub fn add_position(&self, tape: &mut Tape, params: &[Var], tokens: Var) -> Result<Var> {
        match self.position {
            Some(pos) => tape.add(tokens, params[pos.0]),
            None => Ok(tokens),
        }
    }
}
