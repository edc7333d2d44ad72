//! Image loading, cropping, dataset splits, augmentation and manifests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kspace::{generate_phantom, kspace_image, PhantomSpec};
use crate::parallel::ordered_map;
use crate::rng::{derive_seed, SplitMix64};

/// Reads an 8-bit PNG as values in `[0, 1]`. Gray images map `v/255`;
/// RGB and RGBA images take the red channel (alpha is ignored).
pub fn load_grayscale(path: &Path) -> Result<Image> {
    let img_err = |message: String| Error::Image { path: path.to_path_buf(), message };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (raw, stride): (&[u8], usize) = match &decoded {
        DynamicImage::ImageLuma8(b) => (b.as_raw(), 1),
        DynamicImage::ImageLumaA8(b) => (b.as_raw(), 2),
        DynamicImage::ImageRgb8(b) => (b.as_raw(), 3),
        DynamicImage::ImageRgba8(b) => (b.as_raw(), 4),
        other => return Err(img_err(format!("unsupported pixel format {:?}", other.color()))),
    };
    let data = raw.iter().step_by(stride).map(|&v| f64::from(v) / 255.0).collect();
    Image::new(h, w, data)
}

/// Writes `img` as an 8-bit grayscale PNG, clamping to `[0, 1]` and
/// rounding to the nearest level.
pub fn save_grayscale(img: &Image, path: &Path) -> Result<()> {
    let raw = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = GrayImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Central `size × size` window, offset `floor((dim − size)/2)` per axis.
pub fn center_crop(img: &Image, size: usize) -> Result<Image> {
    let (h, w) = img.dims();
    if h < size || w < size || size == 0 {
        return Err(Error::contract(format!("cannot crop {h}x{w} image to {size}x{size}")));
    }
    let (r0, c0) = ((h - size) / 2, (w - size) / 2);
    Ok(Image::from_fn(size, size, |r, c| img.get(r0 + r, c0 + c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

/// Seeded shuffle of `0..n`; the first `round(0.8·n)` positions are train.
pub fn split_dataset(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 items to split, got {n}")));
    }
    let n_train = (0.8 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let mut tags = vec![Split::Val; n];
    for &i in &order[..n_train] {
        tags[i] = Split::Train;
    }
    Ok(tags)
}

/// Training order for one epoch, reshuffled from `seed ^ epoch`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    SplitMix64::new(seed ^ epoch as u64).shuffle(&mut order);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentPolicy {
    #[default]
    None,
    FlipCrop,
    Normalize,
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "flip_crop" => Ok(Self::FlipCrop),
            "normalize" => Ok(Self::Normalize),
            _ => Err(Error::config("augment", format!("expected none|flip_crop|normalize, got `{s}`"))),
        }
    }
}

impl fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::FlipCrop => "flip_crop",
            Self::Normalize => "normalize",
        })
    }
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, |r, c| img.get(r, w - 1 - c))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let (h, w) = img.dims();
    let coord = |dst: usize, n_src: usize, n_dst: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, s - i0 as f64)
    };
    Image::from_fn(height, width, |r, c| {
        let (r0, r1, fr) = coord(r, h, height);
        let (c0, c1, fc) = coord(c, w, width);
        let top = img.get(r0, c0) * (1.0 - fc) + img.get(r0, c1) * fc;
        let bottom = img.get(r1, c0) * (1.0 - fc) + img.get(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

pub const CROP_FRACTION: f64 = 0.875;

pub fn augment(img: &Image, policy: AugmentPolicy, seed: u64) -> Image {
    match policy {
        AugmentPolicy::None => img.clone(),
        AugmentPolicy::FlipCrop => {
            let mut rng = SplitMix64::new(seed);
            let flipped = if rng.next_f64() < 0.5 { hflip(img) } else { img.clone() };
            let (h, w) = img.dims();
            let ch = ((h as f64 * CROP_FRACTION).round() as usize).max(1);
            let cw = ((w as f64 * CROP_FRACTION).round() as usize).max(1);
            let (r0, c0) = (rng.below(h - ch + 1), rng.below(w - cw + 1));
            let crop = Image::from_fn(ch, cw, |r, c| flipped.get(r0 + r, c0 + c));
            resize_bilinear(&crop, h, w)
        }
        AugmentPolicy::Normalize => {
            if img.min() == img.max() {
                return Image::zeros(img.height(), img.width());
            }
            let n = img.len() as f64;
            let mean = img.data().iter().sum::<f64>() / n;
            let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let z = img.map(|v| (v - mean) / var.sqrt());
            let (lo, hi) = (z.min(), z.max());
            z.map(|v| (v - lo) / (hi - lo))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Phantom,
    PngDir,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phantom" => Ok(Self::Phantom),
            "png_dir" => Ok(Self::PngDir),
            _ => Err(Error::config("source", format!("expected phantom|png_dir, got `{s}`"))),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Phantom => "phantom",
            Self::PngDir => "png_dir",
        })
    }
}

/// Training target rendering: k-space log-magnitude, or the image itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataKind {
    #[default]
    Kspace,
    Image,
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kspace" => Ok(Self::Kspace),
            "image" => Ok(Self::Image),
            _ => Err(Error::config("data_kind", format!("expected kspace|image, got `{s}`"))),
        }
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Kspace => "kspace",
            Self::Image => "image",
        })
    }
}

/// A phantom item is written `phantom:<seed>` in the manifest path column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemSource {
    Phantom { seed: u64 },
    File(PathBuf),
}

impl fmt::Display for ItemSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemSource::Phantom { seed } => write!(f, "phantom:{seed}"),
            ItemSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for ItemSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("phantom:") {
            Some(seed) => Ok(ItemSource::Phantom {
                seed: seed.parse().map_err(|_| Error::Format(format!("bad phantom seed `{seed}`")))?,
            }),
            None if s.is_empty() => Err(Error::Format("empty manifest path".into())),
            None => Ok(ItemSource::File(PathBuf::from(s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestItem {
    pub source: ItemSource,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    pub seed: u64,
    pub source: DataSource,
}

impl DatasetManifest {
    /// `n` random phantoms; item `i` uses seed `derive_seed(seed, i)`.
    pub fn phantoms(n: usize, seed: u64) -> Result<Self> {
        let splits = split_dataset(n, seed)?;
        let items = splits
            .into_iter()
            .enumerate()
            .map(|(i, split)| ManifestItem { source: ItemSource::Phantom { seed: derive_seed(seed, i as u64) }, split })
            .collect();
        Ok(Self { items, seed, source: DataSource::Phantom })
    }

    /// Every `*.png` directly inside `dir`, sorted by file name.
    pub fn png_dir(dir: &Path, seed: u64) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                paths.push(path);
            }
        }
        paths.sort();
        let splits = split_dataset(paths.len(), seed)?;
        let items = paths
            .into_iter()
            .zip(splits)
            .map(|(p, split)| ManifestItem { source: ItemSource::File(p), split })
            .collect();
        Ok(Self { items, seed, source: DataSource::PngDir })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn to_text(&self) -> String {
        self.items.iter().map(|it| format!("{}\t{}\n", it.source, it.split)).collect()
    }

    pub fn from_text(text: &str, seed: u64) -> Result<Self> {
        let mut items = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (path, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("manifest line without tab: `{line}`")))?;
            items.push(ManifestItem { source: path.parse()?, split: split.trim().parse()? });
        }
        let source = match items.first() {
            Some(ManifestItem { source: ItemSource::File(_), .. }) => DataSource::PngDir,
            _ => DataSource::Phantom,
        };
        Ok(Self { items, seed, source })
    }
}

/// How manifest items become model targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub image_size: usize,
    pub kind: DataKind,
    pub n_coils: usize,
}

/// Loads one item: phantom synthesis or PNG load plus centre crop, then
/// optional k-space rendering with coil sensitivities seeded per item.
pub fn load_item(item: &ItemSource, spec: &SampleSpec) -> Result<Image> {
    let (img, coil_seed) = match item {
        ItemSource::Phantom { seed } => (generate_phantom(&PhantomSpec::random(spec.image_size, *seed)?), *seed),
        ItemSource::File(path) => {
            let img = center_crop(&load_grayscale(path)?, spec.image_size)?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
            (img, tag)
        }
    };
    match spec.kind {
        DataKind::Image => Ok(img),
        DataKind::Kspace => kspace_image(&img, spec.n_coils, coil_seed),
    }
}

pub fn load_items(manifest: &DatasetManifest, spec: &SampleSpec) -> Result<Vec<Image>> {
    ordered_map(&manifest.items, |it| load_item(&it.source, spec)).into_iter().collect()
}
