//! Prediction heads mapping encoder features back to pixels, and the L1
//! reconstruction loss.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::encoders::layers::INIT_STD;
use crate::encoders::Linear;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masking::PatchMask;
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var, GATHER_ZERO};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub in_dim: usize,
    /// Equals the encoder stride.
    pub upsample_factor: usize,
    pub out_channels: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.upsample_factor == 0 || self.out_channels == 0 {
            return Err(Error::contract(format!("head sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    fn shuffle_channels(&self) -> usize {
        self.upsample_factor * self.upsample_factor * self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Conv,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "conv" => Ok(Self::Conv),
            _ => Err(Error::config("head", format!("expected linear|conv, got `{s}`"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Conv => "conv",
        })
    }
}

/// Which pixels the L1 loss averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    #[default]
    MaskedOnly,
    Full,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_only" => Ok(Self::MaskedOnly),
            "full" => Ok(Self::Full),
            _ => Err(Error::config("loss_mode", format!("expected masked_only|full, got `{s}`"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaskedOnly => "masked_only",
            Self::Full => "full",
        })
    }
}

/// Gather index taking `[h·w, c·f²]` per-position features to a
/// `[c, h·f, w·f]` image: `out[ch, y·f+i, x·f+j] = feat[y·w+x, ch·f²+i·f+j]`.
pub fn pixel_shuffle_index(h: usize, w: usize, f: usize, c: usize) -> Vec<usize> {
    let (oh, ow) = (h * f, w * f);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, i, x, j) = (oy / f, oy % f, ox / f, ox % f);
                idx.push((y * w + x) * c * f * f + ch * f * f + i * f + j);
            }
        }
    }
    idx
}

/// Same rearrangement from channels-first `[c·f², h, w]` features.
fn pixel_shuffle_index_chw(h: usize, w: usize, f: usize, c: usize) -> Vec<usize> {
    let (oh, ow) = (h * f, w * f);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, i, x, j) = (oy / f, oy % f, ox / f, ox % f);
                idx.push(((ch * f * f + i * f + j) * h + y) * w + x);
            }
        }
    }
    idx
}

/// `[h·w, d]` rows to a zero-padded channels-first `[d, h+2, w+2]` map.
fn to_padded_chw(h: usize, w: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(d * (h + 2) * (w + 2));
    for k in 0..d {
        for y in 0..h + 2 {
            for x in 0..w + 2 {
                let inside = (1..=h).contains(&y) && (1..=w).contains(&x);
                idx.push(if inside { ((y - 1) * w + (x - 1)) * d + k } else { GATHER_ZERO });
            }
        }
    }
    idx
}

/// `[c, h, w]` to `[c, h+2, w+2]` with a zero border.
fn pad_chw(h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * (h + 2) * (w + 2));
    for k in 0..c {
        for y in 0..h + 2 {
            for x in 0..w + 2 {
                let inside = (1..=h).contains(&y) && (1..=w).contains(&x);
                idx.push(if inside { (k * h + y - 1) * w + x - 1 } else { GATHER_ZERO });
            }
        }
    }
    idx
}

#[derive(Debug, Clone)]
struct Conv3 {
    weight: ParamId,
    bias: ParamId,
}

impl Conv3 {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut SplitMix64) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::trunc_normal(&[cout, cin, 3, 3], INIT_STD, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.weight.0], 1)?;
        tape.add_channel_bias(y, p[self.bias.0])
    }
}

#[derive(Debug, Clone)]
enum HeadLayers {
    Linear(Linear),
    Conv { first: Conv3, second: Conv3 },
}

/// Feature-to-pixel head: per-position projection (or two 3×3 convs with
/// a gelu between them) to `f²·c` channels, then pixel shuffle.
#[derive(Debug, Clone)]
pub struct ReconHead {
    cfg: HeadConfig,
    layers: HeadLayers,
}

impl ReconHead {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HeadConfig, kind: HeadKind, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.shuffle_channels();
        let layers = match kind {
            HeadKind::Linear => HeadLayers::Linear(Linear::new(store, &format!("{name}.proj"), cfg.in_dim, out, true, rng)),
            HeadKind::Conv => HeadLayers::Conv {
                first: Conv3::new(store, &format!("{name}.conv1"), cfg.in_dim, cfg.in_dim, rng),
                second: Conv3::new(store, &format!("{name}.conv2"), cfg.in_dim, out, rng),
            },
        };
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn kind(&self) -> HeadKind {
        match self.layers {
            HeadLayers::Linear(_) => HeadKind::Linear,
            HeadLayers::Conv { .. } => HeadKind::Conv,
        }
    }

    /// Linear projection of the linear head, if that is the kind.
    pub fn linear(&self) -> Option<&Linear> {
        match &self.layers {
            HeadLayers::Linear(l) => Some(l),
            HeadLayers::Conv { .. } => None,
        }
    }

    /// `[h·w, D]` features on an `h × w` grid to a `[c, h·f, w·f]` image.
    pub fn predict_pixels(&self, tape: &mut Tape, p: &[Var], features: Var, h: usize, w: usize) -> Result<Var> {
        let d = self.cfg.in_dim;
        if tape.shape(features) != [h * w, d] {
            return Err(Error::shape("predict_pixels", tape.shape(features), &[h * w, d]));
        }
        let (f, c) = (self.cfg.upsample_factor, self.cfg.out_channels);
        let out_shape = [c, h * f, w * f];
        match &self.layers {
            HeadLayers::Linear(proj) => {
                let y = proj.forward(tape, p, features)?;
                tape.gather(y, Arc::new(pixel_shuffle_index(h, w, f, c)), &out_shape)
            }
            HeadLayers::Conv { first, second } => {
                let x = tape.gather(features, Arc::new(to_padded_chw(h, w, d)), &[d, h + 2, w + 2])?;
                let x = first.forward(tape, p, x)?;
                let x = tape.gelu(x);
                let x = tape.gather(x, Arc::new(pad_chw(h, w, d)), &[d, h + 2, w + 2])?;
                let x = second.forward(tape, p, x)?;
                tape.gather(x, Arc::new(pixel_shuffle_index_chw(h, w, f, c)), &out_shape)
            }
        }
    }
}

/// `Σ w·|pred − target| / Σ w` over a `[1, H, W]` prediction.
pub fn weighted_l1_loss(tape: &mut Tape, pred: Var, target: &Image, weights: &Image) -> Result<Var> {
    let (h, w) = target.dims();
    if tape.shape(pred) != [1, h, w] {
        return Err(Error::shape("l1_loss", tape.shape(pred), &[1, h, w]));
    }
    weights.same_dims(target, "l1_loss")?;
    let total: f64 = weights.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("l1 loss weights select no pixels"));
    }
    let t = tape.constant(&[1, h, w], target.data().to_vec())?;
    let diff = tape.sub(pred, t)?;
    let diff = tape.abs(diff);
    let scaled = tape.constant(&[1, h, w], weights.data().iter().map(|v| v / total).collect())?;
    let weighted = tape.mul(diff, scaled)?;
    Ok(tape.sum(weighted))
}

/// Mean absolute error over pixels of masked patches (`MaskedOnly`) or
/// over all pixels (`Full`).
pub fn masked_l1_loss(tape: &mut Tape, pred: Var, target: &Image, mask: &PatchMask, mode: LossMode) -> Result<Var> {
    let (h, w) = target.dims();
    let weights = match mode {
        LossMode::MaskedOnly => {
            if mask.masked_count() == 0 {
                return Err(Error::contract("masked_only loss with no masked patches"));
            }
            mask.pixel_weights(h, w)?
        }
        LossMode::Full => {
            mask.pixel_weights(h, w)?;
            Image::filled(h, w, 1.0)
        }
    };
    weighted_l1_loss(tape, pred, target, &weights)
}
