//! Run configuration files, the command implementations behind the `mimk`
//! binary, and SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    load_item, load_items, save_grayscale, split_dataset, AugmentPolicy, DataKind, DataSource, DatasetManifest,
    ItemSource, SampleSpec, Split,
};
use crate::error::{Error, Result};
use crate::head::{HeadKind, LossMode};
use crate::image::Image;
use crate::metrics::{format_sig6, parse_metrics_csv, MetricsRow};
use crate::model::{EncoderKind, MaskMode, ModelConfig, SimMim};
use crate::rng::derive_seed;
use crate::trainer::{
    detect_stagnation, load_checkpoint, predict, restore, score, train, ItemMask, ItemScore, MaskPlan, TrainOutcome,
    TrainRunConfig,
};

/// Failure of a CLI command, carrying its exit code: 2 for usage and
/// configuration problems, 1 for everything that goes wrong at run time.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Run(Error::Config { .. }) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Every key a run config file may set, in the order `to_text` writes them.
pub const CONFIG_KEYS: [&str; 38] = [
    "preset",
    "encoder",
    "image_size",
    "patch_size",
    "embed_dim",
    "depths",
    "heads",
    "window_size",
    "encoder_stride",
    "mlp_ratio",
    "head",
    "mask_mode",
    "mask_patch_size",
    "mask",
    "mask_ratio",
    "line_acceleration",
    "line_center_fraction",
    "loss_mode",
    "epochs",
    "batch_size",
    "base_lr",
    "min_lr",
    "warmup_epochs",
    "weight_decay",
    "max_steps",
    "checkpoint_every",
    "keep_checkpoints",
    "sample_every",
    "stagnation_window",
    "data_source",
    "data_dir",
    "n_phantoms",
    "data_kind",
    "n_coils",
    "augment",
    "out_dir",
    "seed",
    "eval_split",
];

const NONE: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    pub n_phantoms: usize,
    pub kind: DataKind,
    pub n_coils: usize,
}

/// A resolved run configuration: preset defaults overlaid with the keys of
/// a flat `key = value` file (`#` starts a comment).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfigFile {
    values: BTreeMap<&'static str, String>,
    pub train: TrainRunConfig,
    pub data: DataConfig,
    pub out_dir: Option<PathBuf>,
    pub stagnation_window: usize,
    pub eval_split: Option<Split>,
}

fn known_key(key: &str) -> Result<&'static str> {
    CONFIG_KEYS
        .iter()
        .find(|k| **k == key)
        .copied()
        .ok_or_else(|| Error::config(key, "unknown key"))
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn defaults(preset: &str) -> Result<BTreeMap<&'static str, String>> {
    let m = ModelConfig::preset(preset)?;
    let t = TrainRunConfig::new(m.clone());
    let pairs: [(&'static str, String); 38] = [
        ("preset", preset.to_string()),
        ("encoder", m.encoder.to_string()),
        ("image_size", m.image_size.to_string()),
        ("patch_size", m.patch_size.to_string()),
        ("embed_dim", m.embed_dim.to_string()),
        ("depths", list(&m.depths)),
        ("heads", list(&m.heads)),
        ("window_size", m.window_size.to_string()),
        ("encoder_stride", m.encoder_stride.to_string()),
        ("mlp_ratio", m.mlp_ratio.to_string()),
        ("head", m.head.to_string()),
        ("mask_mode", m.mask_mode.to_string()),
        ("mask_patch_size", m.mask_patch_size.to_string()),
        ("mask", "patch".into()),
        ("mask_ratio", "0.5".into()),
        ("line_acceleration", "4".into()),
        ("line_center_fraction", "0.08".into()),
        ("loss_mode", t.loss_mode.to_string()),
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("base_lr", t.base_lr.to_string()),
        ("min_lr", t.min_lr.to_string()),
        ("warmup_epochs", t.warmup_epochs.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("max_steps", NONE.into()),
        ("checkpoint_every", t.checkpoint_every.to_string()),
        ("keep_checkpoints", t.keep_checkpoints.to_string()),
        ("sample_every", t.sample_every.to_string()),
        ("stagnation_window", "5".into()),
        ("data_source", DataSource::Phantom.to_string()),
        ("data_dir", NONE.into()),
        ("n_phantoms", "200".into()),
        ("data_kind", DataKind::Kspace.to_string()),
        ("n_coils", "4".into()),
        ("augment", AugmentPolicy::None.to_string()),
        ("out_dir", NONE.into()),
        ("seed", "0".into()),
        ("eval_split", Split::Val.to_string()),
    ];
    Ok(pairs.into_iter().collect())
}

fn parse_value<T: FromStr>(values: &BTreeMap<&'static str, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = &values[key];
    raw.parse().map_err(|e: T::Err| {
        let detail = e.to_string();
        // Enum parsers already phrase their own config errors; keep only the message.
        let detail = detail.split_once("`: ").map_or(detail.as_str(), |(_, m)| m).to_string();
        Error::config(key, format!("cannot parse `{raw}`: {detail}"))
    })
}

fn parse_list(values: &BTreeMap<&'static str, String>, key: &str) -> Result<Vec<usize>> {
    values[key]
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::config(key, format!("expected comma-separated integers, got `{}`", values[key]))))
        .collect()
}

fn optional<T: FromStr>(values: &BTreeMap<&'static str, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if values[key] == NONE {
        Ok(None)
    } else {
        parse_value(values, key).map(Some)
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<&'static str, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            let key = known_key(key.trim())?;
            if entries.insert(key, value.trim().to_string()).is_some() {
                return Err(Error::config(key, "set more than once"));
            }
        }
        let preset = entries.get("preset").cloned().unwrap_or_else(|| "tiny-swin".into());
        let mut values = defaults(&preset)?;
        values.extend(entries);
        Self::from_values(values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Replaces one key and re-resolves the configuration.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut values = self.values.clone();
        values.insert(known_key(key)?, value.to_string());
        Self::from_values(values)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Fully resolved `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS.iter().map(|k| format!("{k} = {}\n", self.values[k])).collect()
    }

    fn from_values(values: BTreeMap<&'static str, String>) -> Result<Self> {
        let seed: u64 = parse_value(&values, "seed")?;
        let encoder: EncoderKind = parse_value(&values, "encoder")?;
        let model = ModelConfig {
            encoder,
            image_size: parse_value(&values, "image_size")?,
            patch_size: parse_value(&values, "patch_size")?,
            embed_dim: parse_value(&values, "embed_dim")?,
            depths: parse_list(&values, "depths")?,
            heads: parse_list(&values, "heads")?,
            window_size: parse_value(&values, "window_size")?,
            encoder_stride: parse_value(&values, "encoder_stride")?,
            mlp_ratio: parse_value(&values, "mlp_ratio")?,
            head: parse_value::<HeadKind>(&values, "head")?,
            mask_patch_size: parse_value(&values, "mask_patch_size")?,
            mask_mode: parse_value::<MaskMode>(&values, "mask_mode")?,
            seed,
        };
        let mask = match values["mask"].as_str() {
            "patch" => MaskPlan::Patch { ratio: parse_value(&values, "mask_ratio")? },
            "line" => MaskPlan::Line {
                acceleration: parse_value(&values, "line_acceleration")?,
                center_fraction: parse_value(&values, "line_center_fraction")?,
            },
            other => return Err(Error::config("mask", format!("expected patch|line, got `{other}`"))),
        };
        let train = TrainRunConfig {
            model,
            epochs: parse_value(&values, "epochs")?,
            batch_size: parse_value(&values, "batch_size")?,
            base_lr: parse_value(&values, "base_lr")?,
            min_lr: parse_value(&values, "min_lr")?,
            warmup_epochs: parse_value(&values, "warmup_epochs")?,
            weight_decay: parse_value(&values, "weight_decay")?,
            seed,
            loss_mode: parse_value::<LossMode>(&values, "loss_mode")?,
            mask,
            augment: parse_value::<AugmentPolicy>(&values, "augment")?,
            max_steps: optional(&values, "max_steps")?,
            checkpoint_every: parse_value(&values, "checkpoint_every")?,
            keep_checkpoints: parse_value(&values, "keep_checkpoints")?,
            sample_every: parse_value(&values, "sample_every")?,
        };
        train.validate()?;
        let data = DataConfig {
            source: parse_value(&values, "data_source")?,
            dir: optional(&values, "data_dir")?,
            n_phantoms: parse_value(&values, "n_phantoms")?,
            kind: parse_value(&values, "data_kind")?,
            n_coils: parse_value(&values, "n_coils")?,
        };
        if data.source == DataSource::PngDir && data.dir.is_none() {
            return Err(Error::config("data_dir", "required when data_source = png_dir"));
        }
        if data.n_coils == 0 {
            return Err(Error::config("n_coils", "must be at least 1"));
        }
        let stagnation_window = parse_value(&values, "stagnation_window")?;
        if stagnation_window < 2 {
            return Err(Error::config("stagnation_window", "must be at least 2"));
        }
        let eval_split = match values["eval_split"].as_str() {
            "all" => None,
            _ => Some(parse_value(&values, "eval_split")?),
        };
        Ok(Self { out_dir: optional(&values, "out_dir")?, values, train, data, stagnation_window, eval_split })
    }

    /// Applies `--seed` and `--out` command-line overrides.
    pub fn with_overrides(&self, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg = self.clone();
        if let Some(s) = seed {
            cfg = cfg.with("seed", &s.to_string())?;
        }
        if let Some(o) = out {
            cfg = cfg.with("out_dir", &o.display().to_string())?;
        }
        Ok(cfg)
    }

    pub fn sample_spec(&self) -> SampleSpec {
        SampleSpec { image_size: self.train.model.image_size, kind: self.data.kind, n_coils: self.data.n_coils }
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match (self.data.source, &self.data.dir) {
            (DataSource::PngDir, Some(dir)) => DatasetManifest::png_dir(dir, self.train.seed),
            _ => DatasetManifest::phantoms(self.data.n_phantoms, self.train.seed),
        }
    }

    fn require_out(&self) -> CliResult<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `n` phantom images (`image-NNNN.png`), their fully sampled
/// k-space renderings (`kspace-NNNN.png`) and `manifest.txt` listing the
/// images with their train/val split.
pub fn cmd_phantom(n: usize, size: usize, seed: u64, n_coils: usize, out: &Path) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Usage("phantom count must be at least 1".into()));
    }
    if !size.is_power_of_two() || size < 8 {
        return Err(CliError::Usage(format!("size {size} must be a power of two of at least 8")));
    }
    if n_coils == 0 {
        return Err(CliError::Usage("coil count must be at least 1".into()));
    }
    create_dir(out)?;
    let splits = split_dataset(n, seed)?;
    let mut manifest = String::new();
    for (i, split) in splits.iter().enumerate() {
        let source = ItemSource::Phantom { seed: derive_seed(seed, i as u64) };
        for (prefix, kind) in [("image", DataKind::Image), ("kspace", DataKind::Kspace)] {
            let img = load_item(&source, &SampleSpec { image_size: size, kind, n_coils })?;
            save_grayscale(&img, &out.join(format!("{prefix}-{i:04}.png")))?;
        }
        let _ = writeln!(manifest, "image-{i:04}.png\t{split}");
    }
    write_file(&out.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Manifest and loaded targets for a config.
pub fn load_dataset(cfg: &RunConfigFile) -> Result<(DatasetManifest, Vec<Image>)> {
    let manifest = cfg.manifest()?;
    let data = load_items(&manifest, &cfg.sample_spec())?;
    Ok((manifest, data))
}

/// Trains per `cfg` into its output directory, which receives
/// `config.txt`, `manifest.txt`, `metrics.csv`, `train.log`, `masks.txt`,
/// `summary.txt`, `checkpoints/`, `samples/` and SVG plots.
pub fn cmd_train(cfg: &RunConfigFile) -> CliResult<TrainOutcome> {
    let out = cfg.require_out()?;
    create_dir(out)?;
    write_file(&out.join("config.txt"), cfg.to_text())?;
    let (manifest, data) = load_dataset(cfg)?;
    write_file(&out.join("manifest.txt"), manifest.to_text())?;
    let outcome = train(&cfg.train, &manifest, &data, Some(out))?;
    let rows = &outcome.rows;
    if rows.len() >= 2 {
        emit_plot(rows, &["train_loss", "val_loss"], &out.join("loss.svg"))?;
        emit_plot(rows, &["train_ssim", "val_ssim"], &out.join("ssim.svg"))?;
        emit_plot(rows, &["grad_norm"], &out.join("grad_norm.svg"))?;
    }
    let mut summary = String::new();
    if let Some(last) = rows.last() {
        let _ = writeln!(summary, "epochs {}", rows.len());
        let _ = writeln!(summary, "steps {}", outcome.steps.len());
        for name in MetricsRow::COLUMNS {
            let _ = writeln!(summary, "final_{name} {}", format_sig6(last.column(name).unwrap_or(f64::NAN)));
        }
    }
    if rows.len() >= cfg.stagnation_window {
        let flag = detect_stagnation(rows, cfg.stagnation_window)?;
        let _ = writeln!(summary, "stagnation_window {} flag {flag}", cfg.stagnation_window);
    }
    write_file(&out.join("summary.txt"), summary)?;
    Ok(outcome)
}

/// Stand-in predictors for checking the evaluation path without a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DebugModel {
    Identity,
    Zero,
}

impl FromStr for DebugModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "zero" => Ok(Self::Zero),
            _ => Err(Error::config("debug-model", format!("expected identity|zero, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub items: Vec<(usize, ItemScore)>,
    pub mean: ItemScore,
    pub std: ItemScore,
}

impl EvalReport {
    fn new(items: Vec<(usize, ItemScore)>) -> Self {
        let n = items.len() as f64;
        let stat = |f: fn(&ItemScore) -> f64| {
            let mean = items.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
            let var = items.iter().map(|(_, s)| (f(s) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (l1, ssim, rmse) = (stat(|s| s.l1), stat(|s| s.ssim), stat(|s| s.rmse));
        Self {
            items,
            mean: ItemScore { l1: l1.0, ssim: ssim.0, rmse: rmse.0 },
            std: ItemScore { l1: l1.1, ssim: ssim.1, rmse: rmse.1 },
        }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |s: &ItemScore| format!("{},{},{}", format_sig6(s.ssim), format_sig6(s.rmse), format_sig6(s.l1));
        let mut out = String::from("item,ssim,rmse,l1\n");
        for (i, s) in &self.items {
            let _ = writeln!(out, "{i},{}", fmt(s));
        }
        let _ = writeln!(out, "mean,{}", fmt(&self.mean));
        let _ = writeln!(out, "std,{}", fmt(&self.std));
        out
    }
}

/// Scores a checkpoint (or a debug predictor) on the configured split with
/// the run's fixed evaluation masks. Writes `eval.csv` when the config has
/// an output directory.
pub fn cmd_eval(cfg: &RunConfigFile, checkpoint: Option<&Path>, debug: Option<DebugModel>) -> CliResult<EvalReport> {
    let model = match (debug, checkpoint) {
        (Some(_), _) => None,
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --debug-model".into())),
        (None, Some(path)) => {
            let entries = load_checkpoint(path)
                .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
            let mut model = SimMim::new(&cfg.train.model)?;
            restore(model.params_mut(), &entries).map_err(|e| {
                CliError::Usage(format!("checkpoint {} does not fit the configured model: {e}", path.display()))
            })?;
            Some(model)
        }
    };
    let (manifest, data) = load_dataset(cfg)?;
    let indices = match cfg.eval_split {
        Some(split) => manifest.indices(split),
        None => (0..data.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CliError::Usage("evaluation split is empty".into()));
    }
    let run = &cfg.train;
    let mut items = Vec::with_capacity(indices.len());
    for i in indices {
        let target = &data[i];
        let mask = ItemMask::for_eval(run.mask, &run.model, run.seed, i)?;
        let pred = match (&model, debug) {
            (_, Some(DebugModel::Identity)) => target.clone(),
            (_, Some(DebugModel::Zero)) => Image::filled(target.height(), target.width(), 0.0),
            (Some(m), None) => predict(m, target, &mask)?,
            (None, None) => unreachable!("checked above"),
        };
        items.push((i, score(&pred, target, &mask, run.loss_mode)?));
    }
    let report = EvalReport::new(items);
    if let Some(out) = &cfg.out_dir {
        create_dir(out)?;
        write_file(&out.join("eval.csv"), report.to_csv())?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub none: Vec<MetricsRow>,
    pub augmented: Vec<MetricsRow>,
    pub csv: String,
}

/// Trains the config twice with the same seed, once without augmentation
/// and once with flips and crops, into `none/` and `flip_crop/` under the
/// output directory, then writes `ablation.csv` (validation SSIM per
/// epoch) and `ablation.svg`.
pub fn cmd_ablate_augmentation(cfg: &RunConfigFile) -> CliResult<AblationReport> {
    let out = cfg.require_out()?.to_path_buf();
    create_dir(&out)?;
    write_file(&out.join("config.txt"), cfg.to_text())?;
    let mut runs = Vec::new();
    for policy in [AugmentPolicy::None, AugmentPolicy::FlipCrop] {
        let name = policy.to_string();
        let sub = cfg.with("augment", &name)?.with("out_dir", &out.join(&name).display().to_string())?;
        runs.push(cmd_train(&sub)?.rows);
    }
    let augmented = runs.pop().expect("two runs");
    let none = runs.pop().expect("two runs");
    let mut csv = String::from("epoch,ssim_none,ssim_aug\n");
    for (a, b) in none.iter().zip(&augmented) {
        let _ = writeln!(csv, "{},{},{}", a.epoch, format_sig6(a.val_ssim), format_sig6(b.val_ssim));
    }
    write_file(&out.join("ablation.csv"), &csv)?;
    let series = |label: &str, rows: &[MetricsRow]| Series {
        label: label.to_string(),
        points: rows.iter().map(|r| (r.epoch as f64, r.val_ssim)).collect(),
    };
    let svg = render_plot(
        &[series(&AugmentPolicy::None.to_string(), &none), series(&AugmentPolicy::FlipCrop.to_string(), &augmented)],
        "epoch",
        "val_ssim",
    )?;
    write_file(&out.join("ablation.svg"), svg)?;
    Ok(AblationReport { none, augmented, csv })
}

/// Reads a metrics CSV and plots `columns` into `out`.
pub fn cmd_plot(csv: &Path, columns: &[String], out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let rows = parse_metrics_csv(&text)?;
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    emit_plot(&rows, &cols, out).map_err(|e| match e {
        Error::Contract(m) => CliError::Usage(m),
        other => other.into(),
    })
}

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 130.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Axis range with a degenerate span padded by ±1, then widened by 5% of
/// the span on each side.
pub fn axis_range(lo: f64, hi: f64) -> (f64, f64) {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG line plot. Non-finite points are left out.
pub fn render_plot(series: &[Series], x_label: &str, y_label: &str) -> Result<String> {
    let finite: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::contract("plot has no finite points"));
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        axis_range(lo, hi)
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let (pw, ph) = (PLOT_W - MARGIN_L - MARGIN_R, PLOT_H - MARGIN_T - MARGIN_B);
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{PLOT_W}" height="{PLOT_H}" fill="white"/>"#);
    let (left, right, top, bottom) = (MARGIN_L, MARGIN_L + pw, MARGIN_T, MARGIN_T + ph);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    for k in 0..=4 {
        let f = f64::from(k) / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(svg, r#"<line x1="{px:.2}" y1="{bottom}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, bottom + 4.0);
        let _ = writeln!(
            svg,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 16.0,
            format_sig6(xv)
        );
        let _ = writeln!(svg, r#"<line x1="{:.2}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="black"/>"#, left - 4.0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py + 4.0,
            format_sig6(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        PLOT_H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 10.0 + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            right + 10.0,
            right + 30.0
        );
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, right + 36.0, ly + 4.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Plots the named metric columns against epoch.
pub fn emit_plot(rows: &[MetricsRow], columns: &[&str], out: &Path) -> Result<()> {
    if rows.len() < 2 {
        return Err(Error::contract(format!("plot needs at least 2 rows, got {}", rows.len())));
    }
    if columns.is_empty() {
        return Err(Error::contract("plot needs at least one column"));
    }
    let mut series = Vec::with_capacity(columns.len());
    for &name in columns {
        if !MetricsRow::COLUMNS.contains(&name) {
            return Err(Error::contract(format!("unknown metrics column `{name}`")));
        }
        series.push(Series {
            label: name.to_string(),
            points: rows.iter().map(|r| (r.epoch as f64, r.column(name).unwrap_or(f64::NAN))).collect(),
        });
    }
    let y_label = if columns.len() == 1 { columns[0] } else { "value" };
    write_file(out, render_plot(&series, "epoch", y_label)?)
}
