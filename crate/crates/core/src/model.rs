//! SimMIM composition: patch embedding, mask tokens, encoder, final norm,
//! pixel head.

use std::fmt;
use std::str::FromStr;

use crate::encoders::{LayerNorm, PatchEmbed, PatchEmbedConfig, SwinConfig, SwinEncoder, ViTConfig, VitEncoder};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadKind, ReconHead};
use crate::image::Image;
use crate::masking::{apply_mask_tokens, PatchMask};
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Vit,
    Swin,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Self::Vit),
            "swin" => Ok(Self::Swin),
            _ => Err(Error::config("encoder", format!("expected vit|swin, got `{s}`"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vit => "vit",
            Self::Swin => "swin",
        })
    }
}

/// Where the mask is applied: replacing embedded tokens, or zeroing pixels
/// before embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Token,
    Pixel,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "pixel" => Ok(Self::Pixel),
            _ => Err(Error::config("mask_mode", format!("expected token|pixel, got `{s}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Token => "token",
            Self::Pixel => "pixel",
        })
    }
}

/// Every hyperparameter of the model. ViT reads `depths[0]` and
/// `heads[0]`; Swin reads one entry per stage. Window attention carries no
/// relative position bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub encoder_stride: usize,
    pub mlp_ratio: f64,
    pub head: HeadKind,
    /// Side of one masking unit in pixels; a multiple of `patch_size`.
    pub mask_patch_size: usize,
    pub mask_mode: MaskMode,
    /// Weight initialisation seed.
    pub seed: u64,
}

pub const PRESETS: &[&str] = &["tiny-swin", "tiny-vit", "grad-swin", "grad-vit", "full-swin", "full-vit"];

impl ModelConfig {
    /// Named configurations. `tiny-*` are the desk defaults on 64² inputs,
    /// `grad-*` are 16² models for gradient checks, and `full-*` describe
    /// the full-size 192² setting with 1-pixel patches (far beyond a desk
    /// budget; the Swin one reaches stride 32 through six stages).
    pub fn preset(name: &str) -> Result<Self> {
        let swin = |image_size, patch_size, embed_dim, depths: &[usize], heads: &[usize], window_size, encoder_stride| Self {
            encoder: EncoderKind::Swin,
            image_size,
            patch_size,
            embed_dim,
            depths: depths.to_vec(),
            heads: heads.to_vec(),
            window_size,
            encoder_stride,
            mlp_ratio: 2.0,
            head: HeadKind::Linear,
            mask_patch_size: patch_size,
            mask_mode: MaskMode::Token,
            seed: 0,
        };
        let vit = |image_size, patch_size, embed_dim, depth, heads| Self {
            encoder: EncoderKind::Vit,
            image_size,
            patch_size,
            embed_dim,
            depths: vec![depth],
            heads: vec![heads],
            window_size: 0,
            encoder_stride: patch_size,
            mlp_ratio: 2.0,
            head: HeadKind::Linear,
            mask_patch_size: patch_size,
            mask_mode: MaskMode::Token,
            seed: 0,
        };
        let cfg = match name {
            "tiny-swin" => swin(64, 4, 16, &[2, 2], &[2, 4], 4, 8),
            "tiny-vit" => vit(64, 8, 32, 4, 4),
            "grad-swin" => swin(16, 2, 4, &[2, 2], &[1, 2], 2, 4),
            "grad-vit" => vit(16, 4, 8, 2, 2),
            "full-swin" => Self {
                mlp_ratio: 4.0,
                ..swin(192, 1, 128, &[2, 2, 2, 2, 6, 2], &[4, 8, 16, 32, 64, 128], 6, 32)
            },
            "full-vit" => Self { mlp_ratio: 4.0, ..vit(192, 1, 768, 12, 12) },
            _ => {
                return Err(Error::config("preset", format!("unknown preset `{name}`, expected one of {PRESETS:?}")));
            }
        };
        Ok(cfg)
    }

    fn patch(&self) -> PatchEmbedConfig {
        PatchEmbedConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            in_channels: 1,
            embed_dim: self.embed_dim,
        }
    }

    pub fn vit_config(&self) -> Result<ViTConfig> {
        let (&[depth], &[heads]) = (self.depths.as_slice(), self.heads.as_slice()) else {
            return Err(Error::config("depths", "vit takes a single depth and head count"));
        };
        let cfg = ViTConfig { depth, heads, embed_dim: self.embed_dim, mlp_ratio: self.mlp_ratio, patch: self.patch() };
        cfg.validate()?;
        if self.encoder_stride != cfg.encoder_stride() {
            return Err(Error::config(
                "encoder_stride",
                format!("vit stride is its patch size {}, got {}", self.patch_size, self.encoder_stride),
            ));
        }
        Ok(cfg)
    }

    pub fn swin_config(&self) -> Result<SwinConfig> {
        let cfg = SwinConfig {
            stage_depths: self.depths.clone(),
            heads_per_stage: self.heads.clone(),
            window_size: self.window_size,
            embed_dim: self.embed_dim,
            mlp_ratio: self.mlp_ratio,
            patch: self.patch(),
            encoder_stride: self.encoder_stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Vit => self.embed_dim,
            EncoderKind::Swin => self.embed_dim << self.depths.len().saturating_sub(1),
        }
    }

    /// Side of the final feature grid.
    pub fn out_grid(&self) -> usize {
        self.image_size / self.encoder_stride
    }

    /// Side of the mask grid.
    pub fn mask_grid(&self) -> usize {
        self.image_size / self.mask_patch_size
    }

    pub fn validate(&self) -> Result<()> {
        match self.encoder {
            EncoderKind::Vit => self.vit_config().map(drop)?,
            EncoderKind::Swin => self.swin_config().map(drop)?,
        }
        let m = self.mask_patch_size;
        if m == 0 || !m.is_multiple_of(self.patch_size) || !self.image_size.is_multiple_of(m) {
            return Err(Error::config(
                "mask_patch_size",
                format!("{m} must be a multiple of patch size {} dividing {}", self.patch_size, self.image_size),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Vit(VitEncoder),
    Swin(SwinEncoder),
}

#[derive(Debug, Clone)]
pub struct SimMim {
    cfg: ModelConfig,
    store: ParamStore,
    embed: PatchEmbed,
    mask_token: ParamId,
    encoder: Encoder,
    norm: LayerNorm,
    head: ReconHead,
}

impl SimMim {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(cfg.seed);
        let mut store = ParamStore::new();
        let is_vit = cfg.encoder == EncoderKind::Vit;
        let embed = PatchEmbed::new(&mut store, "embed", &cfg.patch(), is_vit, &mut rng)?;
        let mask_token = store.add("mask_token", Tensor::trunc_normal(&[cfg.embed_dim], 0.02, &mut rng));
        let encoder = match cfg.encoder {
            EncoderKind::Vit => Encoder::Vit(VitEncoder::new(&mut store, "encoder", &cfg.vit_config()?, &mut rng)?),
            EncoderKind::Swin => Encoder::Swin(SwinEncoder::new(&mut store, "encoder", &cfg.swin_config()?, &mut rng)?),
        };
        let norm = LayerNorm::new(&mut store, "norm", cfg.out_dim());
        let head_cfg = HeadConfig { in_dim: cfg.out_dim(), upsample_factor: cfg.encoder_stride, out_channels: 1 };
        let head = ReconHead::new(&mut store, "head", &head_cfg, cfg.head, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, embed, mask_token, encoder, norm, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[1, S, S]` input tensor for `img`.
    pub fn input(&self, tape: &mut Tape, img: &Image) -> Result<Var> {
        let s = self.cfg.image_size;
        if img.dims() != (s, s) {
            return Err(Error::shape("model_input", &[img.height(), img.width()], &[s, s]));
        }
        tape.constant(&[1, s, s], img.data().to_vec())
    }

    /// Predicts the full `[1, S, S]` image. `mask` is on the mask grid
    /// (`image_size / mask_patch_size` per side).
    pub fn forward(&self, tape: &mut Tape, params: &[Var], img: Var, mask: Option<&PatchMask>) -> Result<Var> {
        let cfg = &self.cfg;
        let token_mask = match mask {
            Some(m) => {
                let g = cfg.mask_grid();
                if m.grid() != (g, g) {
                    return Err(Error::shape("model_mask", &[m.grid().0, m.grid().1], &[g, g]));
                }
                Some(m)
            }
            None => None,
        };
        let mut img = img;
        if let (Some(m), MaskMode::Pixel) = (token_mask, cfg.mask_mode) {
            let s = cfg.image_size;
            let keep = m.pixel_weights(s, s)?.map(|w| 1.0 - w);
            let keep = tape.constant(&[1, s, s], keep.into_data())?;
            img = tape.mul(img, keep)?;
        }
        let mut x = self.embed.forward(tape, params, img)?;
        if let (Some(m), MaskMode::Token) = (token_mask, cfg.mask_mode) {
            let fine = m.upsample(cfg.mask_patch_size / cfg.patch_size)?;
            x = apply_mask_tokens(tape, x, &fine, params[self.mask_token.0])?;
        }
        x = self.embed.add_position(tape, params, x)?;
        x = match &self.encoder {
            Encoder::Vit(e) => e.forward(tape, params, x)?,
            Encoder::Swin(e) => e.forward(tape, params, x)?,
        };
        x = self.norm.forward(tape, params, x)?;
        let g = cfg.out_grid();
        self.head.predict_pixels(tape, params, x, g, g)
    }

    /// Gradient-free reconstruction of `img` under `mask`.
    pub fn reconstruct(&self, img: &Image, mask: Option<&PatchMask>) -> Result<Image> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let x = self.input(&mut tape, img)?;
        let y = self.forward(&mut tape, &params, x, mask)?;
        Image::new(img.height(), img.width(), tape.value(y).to_vec())
    }
}
