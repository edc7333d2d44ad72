//! Random patch masks and Cartesian line undersampling.
//!
//! Both kinds serialise to one-line records used in run manifests:
//! `patch ratio=0.5 seed=7 grid=12x12` and `line h=192 acc=4 cf=0.08`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kspace::ComplexGrid;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Var};

/// Grid of patch flags, `true` = hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    grid_h: usize,
    grid_w: usize,
    flags: Vec<bool>,
    ratio: f64,
    seed: u64,
}

/// Masks exactly `round(ratio·N)` of the `N = grid_h·grid_w` patches: the
/// patch indices are Fisher-Yates shuffled with [`SplitMix64`] seeded by
/// `seed` and the first `round(ratio·N)` are taken.
pub fn random_patch_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::contract("mask grid must be non-empty"));
    }
    let n = grid_h * grid_w;
    let count = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let mut flags = vec![false; n];
    for &i in &order[..count] {
        flags[i] = true;
    }
    Ok(PatchMask { grid_h, grid_w, flags, ratio, seed })
}

impl PatchMask {
    /// Mask with explicit flags (ratio is recomputed from the flags).
    pub fn from_flags(grid_h: usize, grid_w: usize, flags: Vec<bool>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || flags.len() != grid_h * grid_w {
            return Err(Error::shape("patch_mask", &[grid_h, grid_w], &[flags.len()]));
        }
        let ratio = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        Ok(Self { grid_h, grid_w, flags, ratio, seed: 0 })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.flags[r * self.grid_w + c]
    }

    /// Flags on a grid `factor` times finer in each direction.
    pub fn upsample(&self, factor: usize) -> Result<PatchMask> {
        if factor == 0 {
            return Err(Error::contract("upsample factor must be positive"));
        }
        let (h, w) = (self.grid_h * factor, self.grid_w * factor);
        let flags = (0..h * w)
            .map(|i| self.is_masked(i / w / factor, i % w / factor))
            .collect();
        Ok(PatchMask { grid_h: h, grid_w: w, flags, ratio: self.ratio, seed: self.seed })
    }

    /// Per-pixel 0/1 weights for an image tiled exactly by the mask grid.
    pub fn pixel_weights(&self, height: usize, width: usize) -> Result<Image> {
        if !height.is_multiple_of(self.grid_h) || !width.is_multiple_of(self.grid_w) {
            return Err(Error::shape("pixel_weights", &[height, width], &[self.grid_h, self.grid_w]));
        }
        let (ph, pw) = (height / self.grid_h, width / self.grid_w);
        Ok(Image::from_fn(height, width, |r, c| {
            if self.is_masked(r / ph, c / pw) { 1.0 } else { 0.0 }
        }))
    }

    pub fn spec(&self) -> MaskSpec {
        MaskSpec::Patch { ratio: self.ratio, seed: self.seed, grid_h: self.grid_h, grid_w: self.grid_w }
    }
}

/// Replaces the token rows of masked patches by `mask_token`; other rows
/// pass through untouched.
pub fn apply_mask_tokens(tape: &mut Tape, tokens: Var, mask: &PatchMask, mask_token: Var) -> Result<Var> {
    let shape = tape.shape(tokens);
    if shape.len() != 2 || shape[0] != mask.flags.len() {
        return Err(Error::shape("apply_mask_tokens", shape, &[mask.grid_h, mask.grid_w]));
    }
    tape.replace_rows(tokens, mask_token, Arc::new(mask.flags.clone()))
}

/// Sets pixels inside masked patches to zero.
pub fn blackout(img: &Image, mask: &PatchMask) -> Result<Image> {
    let w = mask.pixel_weights(img.height(), img.width())?;
    let data = img.data().iter().zip(w.data()).map(|(v, m)| if *m > 0.0 { 0.0 } else { *v }).collect();
    Image::new(img.height(), img.width(), data)
}

/// Rows of a centred k-space that survive Cartesian undersampling.
#[derive(Debug, Clone, PartialEq)]
pub struct LineMask {
    height: usize,
    kept_rows: BTreeSet<usize>,
    acceleration: usize,
    center_fraction: f64,
}

/// Keeps `floor(height·center_fraction)` contiguous rows starting at
/// `height/2 - n/2` (the band around the zero-frequency row of a centred
/// k-space) plus every row index divisible by `acceleration`.
pub fn cartesian_line_mask(height: usize, acceleration: usize, center_fraction: f64) -> Result<LineMask> {
    if acceleration < 1 {
        return Err(Error::contract("acceleration must be at least 1"));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(Error::contract(format!("center fraction {center_fraction} outside [0, 1]")));
    }
    if height == 0 {
        return Err(Error::contract("line mask height must be positive"));
    }
    let band = (height as f64 * center_fraction).floor() as usize;
    let start = height / 2 - band / 2;
    let mut kept_rows: BTreeSet<usize> = (start..start + band).collect();
    kept_rows.extend((0..height).step_by(acceleration));
    Ok(LineMask { height, kept_rows, acceleration, center_fraction })
}

impl LineMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kept_rows(&self) -> &BTreeSet<usize> {
        &self.kept_rows
    }

    pub fn acceleration(&self) -> usize {
        self.acceleration
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn keeps(&self, row: usize) -> bool {
        self.kept_rows.contains(&row)
    }

    /// Per-pixel weights marking dropped rows with 1.
    pub fn dropped_weights(&self, width: usize) -> Image {
        Image::from_fn(self.height, width, |r, _| if self.keeps(r) { 0.0 } else { 1.0 })
    }

    /// Zeroes the dropped rows of an image.
    pub fn apply_to_image(&self, img: &Image) -> Result<Image> {
        if img.height() != self.height {
            return Err(Error::shape("apply_line_mask", &[img.height()], &[self.height]));
        }
        Ok(Image::from_fn(img.height(), img.width(), |r, c| {
            if self.keeps(r) { img.get(r, c) } else { 0.0 }
        }))
    }

    pub fn spec(&self) -> MaskSpec {
        MaskSpec::Line {
            height: self.height,
            acceleration: self.acceleration,
            center_fraction: self.center_fraction,
        }
    }
}

/// Zeroes every row of `k` not kept by `mask`; kept rows are copied verbatim.
pub fn apply_line_mask(k: &ComplexGrid, mask: &LineMask) -> Result<ComplexGrid> {
    if k.height() != mask.height {
        return Err(Error::shape("apply_line_mask", &[k.height()], &[mask.height]));
    }
    let mut out = ComplexGrid::zeros(k.height(), k.width());
    for &r in &mask.kept_rows {
        for c in 0..k.width() {
            out.set(r, c, k.get(r, c));
        }
    }
    Ok(out)
}

/// Serialisable description of a mask.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    Patch { ratio: f64, seed: u64, grid_h: usize, grid_w: usize },
    Line { height: usize, acceleration: usize, center_fraction: f64 },
}

impl MaskSpec {
    pub fn build_patch(&self) -> Result<PatchMask> {
        match *self {
            MaskSpec::Patch { ratio, seed, grid_h, grid_w } => random_patch_mask(grid_h, grid_w, ratio, seed),
            MaskSpec::Line { .. } => Err(Error::contract("not a patch mask spec")),
        }
    }

    pub fn build_line(&self) -> Result<LineMask> {
        match *self {
            MaskSpec::Line { height, acceleration, center_fraction } => {
                cartesian_line_mask(height, acceleration, center_fraction)
            }
            MaskSpec::Patch { .. } => Err(Error::contract("not a line mask spec")),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::Patch { ratio, seed, grid_h, grid_w } => {
                write!(f, "patch ratio={ratio} seed={seed} grid={grid_h}x{grid_w}")
            }
            MaskSpec::Line { height, acceleration, center_fraction } => {
                write!(f, "line h={height} acc={acceleration} cf={center_fraction}")
            }
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad mask record `{s}`"));
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(bad)?;
        let mut fields = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            if fields.insert(k, v).is_some() {
                return Err(bad());
            }
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(bad);
        let spec = match kind {
            "patch" => {
                let ratio = take("ratio")?.parse().map_err(|_| bad())?;
                let seed = take("seed")?.parse().map_err(|_| bad())?;
                let (gh, gw) = take("grid")?.split_once('x').ok_or_else(bad)?;
                MaskSpec::Patch {
                    ratio,
                    seed,
                    grid_h: gh.parse().map_err(|_| bad())?,
                    grid_w: gw.parse().map_err(|_| bad())?,
                }
            }
            "line" => MaskSpec::Line {
                height: take("h")?.parse().map_err(|_| bad())?,
                acceleration: take("acc")?.parse().map_err(|_| bad())?,
                center_fraction: take("cf")?.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        if !fields.is_empty() {
            return Err(bad());
        }
        Ok(spec)
    }
}
