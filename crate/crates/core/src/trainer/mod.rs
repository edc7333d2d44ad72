//! Optimisation loop, evaluation, stagnation check and checkpoints.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, restore, save_checkpoint};
pub use optim::{adamw_step, lr_at, OptimState, Schedule};

use crate::data::{augment, epoch_order, save_grayscale, AugmentPolicy, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::head::{masked_l1_loss, weighted_l1_loss, LossMode};
use crate::image::Image;
use crate::masking::{blackout, cartesian_line_mask, random_patch_mask, LineMask, MaskSpec, PatchMask};
use crate::metrics::{grad_norm, metrics_csv, rmse, ssim, MetricsRow, SsimParams};
use crate::model::{ModelConfig, SimMim};
use crate::parallel::ordered_map;
use crate::rng::derive_seed;
use crate::tensor::{ParamId, Tape};

/// How each training target is hidden from the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskPlan {
    /// Fresh random patch mask per item and epoch, on the model's mask grid.
    Patch { ratio: f64 },
    /// One fixed Cartesian line mask over rows of the (centred) k-space image.
    Line { acceleration: usize, center_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub mask: MaskPlan,
    pub augment: AugmentPolicy,
    /// Stops after this many optimiser steps (the last epoch may be partial).
    pub max_steps: Option<usize>,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    pub sample_every: usize,
}

impl TrainRunConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            epochs: 10,
            batch_size: 1,
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 1,
            weight_decay: 0.05,
            seed: 0,
            loss_mode: LossMode::MaskedOnly,
            mask: MaskPlan::Patch { ratio: 0.5 },
            augment: AugmentPolicy::None,
            max_steps: None,
            checkpoint_every: 10,
            keep_checkpoints: 3,
            sample_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let cfg_err = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.epochs == 0 {
            return cfg_err("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return cfg_err("batch_size", "must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return cfg_err("warmup_epochs", format!("{} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return cfg_err("base_lr", format!("need 0 <= min_lr <= base_lr, got {} / {}", self.min_lr, self.base_lr));
        }
        if self.max_steps == Some(0) {
            return cfg_err("max_steps", "must be at least 1".into());
        }
        if self.checkpoint_every == 0 || self.sample_every == 0 || self.keep_checkpoints == 0 {
            return cfg_err("checkpoint_every", "checkpoint and sample cadences must be positive".into());
        }
        match self.mask {
            MaskPlan::Patch { ratio } => {
                if !(0.0..=1.0).contains(&ratio) {
                    return cfg_err("mask_ratio", format!("{ratio} outside [0, 1]"));
                }
                let g = self.model.mask_grid();
                if self.loss_mode == LossMode::MaskedOnly && (ratio * (g * g) as f64).round() == 0.0 {
                    return cfg_err("mask_ratio", "masks no patch, masked_only loss is undefined".into());
                }
            }
            MaskPlan::Line { acceleration, center_fraction } => {
                let lm = cartesian_line_mask(self.model.image_size, acceleration, center_fraction)
                    .map_err(|e| Error::config("line_acceleration", e.to_string()))?;
                if self.loss_mode == LossMode::MaskedOnly && lm.kept_rows().len() == self.model.image_size {
                    return cfg_err("line_acceleration", "keeps every row, masked_only loss is undefined".into());
                }
            }
        }
        Ok(())
    }
}

/// A concrete mask for one item.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemMask {
    Patch(PatchMask),
    Line(LineMask),
}

const MASK_STREAM: u64 = 0x6d61_736b;
const AUG_STREAM: u64 = 0x6175_676d;
const EVAL_STREAM: u64 = 0x6576_616c;

impl ItemMask {
    pub fn build(plan: MaskPlan, model: &ModelConfig, seed: u64) -> Result<Self> {
        match plan {
            MaskPlan::Patch { ratio } => {
                let g = model.mask_grid();
                Ok(ItemMask::Patch(random_patch_mask(g, g, ratio, seed)?))
            }
            MaskPlan::Line { acceleration, center_fraction } => Ok(ItemMask::Line(cartesian_line_mask(
                model.image_size,
                acceleration,
                center_fraction,
            )?)),
        }
    }

    /// Mask used during training step `epoch` for item `item`.
    pub fn for_training(plan: MaskPlan, model: &ModelConfig, seed: u64, epoch: usize, item: usize) -> Result<Self> {
        Self::build(plan, model, derive_seed(derive_seed(seed ^ MASK_STREAM, epoch as u64), item as u64))
    }

    /// Fixed mask used whenever item `item` is evaluated.
    pub fn for_eval(plan: MaskPlan, model: &ModelConfig, seed: u64, item: usize) -> Result<Self> {
        Self::build(plan, model, derive_seed(seed ^ EVAL_STREAM, item as u64))
    }

    pub fn spec(&self) -> MaskSpec {
        match self {
            ItemMask::Patch(m) => m.spec(),
            ItemMask::Line(m) => m.spec(),
        }
    }

    fn patch(&self) -> Option<&PatchMask> {
        match self {
            ItemMask::Patch(m) => Some(m),
            ItemMask::Line(_) => None,
        }
    }

    /// What the model sees: the target itself for patch masks (the model
    /// masks internally), dropped rows zeroed for line masks.
    pub fn model_input(&self, target: &Image) -> Result<Image> {
        match self {
            ItemMask::Patch(_) => Ok(target.clone()),
            ItemMask::Line(m) => m.apply_to_image(target),
        }
    }

    /// Human-facing view of the masked input.
    pub fn display_input(&self, target: &Image) -> Result<Image> {
        match self {
            ItemMask::Patch(m) => blackout(target, m),
            ItemMask::Line(m) => m.apply_to_image(target),
        }
    }

    /// Pixels the loss averages over.
    pub fn loss_weights(&self, h: usize, w: usize, mode: LossMode) -> Result<Image> {
        match (mode, self) {
            (LossMode::Full, _) => Ok(Image::filled(h, w, 1.0)),
            (LossMode::MaskedOnly, ItemMask::Patch(m)) => m.pixel_weights(h, w),
            (LossMode::MaskedOnly, ItemMask::Line(m)) => Ok(m.dropped_weights(w)),
        }
    }
}

/// Per-item evaluation numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemScore {
    pub l1: f64,
    pub ssim: f64,
    pub rmse: f64,
}

/// Image that SSIM and RMSE are measured on: with `MaskedOnly` the
/// prediction fills the masked region and the visible pixels come from the
/// target; with `Full` it is the raw prediction.
pub fn evaluated_image(pred: &Image, target: &Image, mask: &ItemMask, mode: LossMode) -> Result<Image> {
    pred.same_dims(target, "evaluated_image")?;
    match mode {
        LossMode::Full => Ok(pred.clone()),
        LossMode::MaskedOnly => {
            let w = mask.loss_weights(target.height(), target.width(), mode)?;
            let data = pred
                .data()
                .iter()
                .zip(target.data())
                .zip(w.data())
                .map(|((p, t), w)| if *w > 0.0 { *p } else { *t })
                .collect();
            Image::new(target.height(), target.width(), data)
        }
    }
}

pub fn score(pred: &Image, target: &Image, mask: &ItemMask, mode: LossMode) -> Result<ItemScore> {
    let (h, w) = target.dims();
    let weights = mask.loss_weights(h, w, mode)?;
    let total: f64 = weights.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("evaluation mask selects no pixels"));
    }
    let l1 = pred.data().iter().zip(target.data()).zip(weights.data()).map(|((p, t), w)| w * (p - t).abs()).sum::<f64>()
        / total;
    let shown = evaluated_image(pred, target, mask, mode)?;
    Ok(ItemScore { l1, ssim: ssim(&shown, target, &SsimParams::default())?, rmse: rmse(&shown, target)? })
}

/// Gradient-free prediction of `target` under `mask`.
pub fn predict(model: &SimMim, target: &Image, mask: &ItemMask) -> Result<Image> {
    model.reconstruct(&mask.model_input(target)?, mask.patch())
}

/// Scores `model` on `items` of `data` with their fixed evaluation masks.
pub fn evaluate_items(
    model: &SimMim,
    data: &[Image],
    items: &[usize],
    run: &TrainRunConfig,
) -> Result<Vec<ItemScore>> {
    ordered_map(items, |&i| {
        let mask = ItemMask::for_eval(run.mask, &run.model, run.seed, i)?;
        let pred = predict(model, &data[i], &mask)?;
        score(&pred, &data[i], &mask, run.loss_mode)
    })
    .into_iter()
    .collect()
}

/// Mean L1 and mean SSIM; both NaN for an empty split.
pub fn evaluate(model: &SimMim, data: &[Image], items: &[usize], run: &TrainRunConfig) -> Result<(f64, f64)> {
    let scores = evaluate_items(model, data, items, run)?;
    let n = scores.len() as f64;
    Ok((scores.iter().map(|s| s.l1).sum::<f64>() / n, scores.iter().map(|s| s.ssim).sum::<f64>() / n))
}

/// One optimiser step's log entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub steps: Vec<StepRecord>,
    pub model: SimMim,
    pub checkpoints: Vec<PathBuf>,
}

fn loss_and_grads(model: &SimMim, target: &Image, mask: &ItemMask, mode: LossMode) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape);
    let input = mask.model_input(target)?;
    let x = model.input(&mut tape, &input)?;
    let pred = model.forward(&mut tape, &params, x, mask.patch())?;
    let loss = match mask {
        ItemMask::Patch(m) => masked_l1_loss(&mut tape, pred, target, m, mode)?,
        ItemMask::Line(_) => {
            let w = mask.loss_weights(target.height(), target.width(), mode)?;
            weighted_l1_loss(&mut tape, pred, target, &w)?
        }
    };
    let grads = tape.backward(loss)?;
    let per_param = params
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((tape.value(loss)[0], per_param))
}

/// Writes run artefacts under `dir`: `metrics.csv`, `train.log`,
/// `masks.txt`, `checkpoints/` and `samples/`.
struct RunWriter {
    dir: PathBuf,
    log: String,
    periodic: Vec<PathBuf>,
    saved: Vec<PathBuf>,
}

impl RunWriter {
    fn new(dir: &Path) -> Result<Self> {
        for sub in ["checkpoints", "samples"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { dir: dir.to_path_buf(), log: String::new(), periodic: Vec::new(), saved: Vec::new() })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn checkpoint(&mut self, model: &SimMim, name: &str, periodic: bool, keep: usize) -> Result<()> {
        let p = self.dir.join("checkpoints").join(name);
        save_checkpoint(model.params(), &p)?;
        if periodic {
            self.periodic.push(p.clone());
            while self.periodic.len() > keep {
                let old = self.periodic.remove(0);
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                self.saved.retain(|s| s != &old);
            }
        }
        if !self.saved.contains(&p) {
            self.saved.push(p);
        }
        Ok(())
    }
}

/// Side-by-side strip: masked input | reconstruction | target, separated
/// by 4-pixel white columns.
pub fn sample_strip(model: &SimMim, target: &Image, mask: &ItemMask) -> Result<Image> {
    let pred = predict(model, target, mask)?;
    Image::hconcat(&[mask.display_input(target)?, pred.map(|v| v.clamp(0.0, 1.0)), target.clone()], 4, 1.0)
}

/// Trains a fresh model on the train split of `manifest` (`data[i]` is the
/// target for `manifest.items[i]`). With `out`, run artefacts are written
/// there as training proceeds.
pub fn train(run: &TrainRunConfig, manifest: &DatasetManifest, data: &[Image], out: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    if data.len() != manifest.items.len() {
        return Err(Error::contract(format!("{} images for {} manifest items", data.len(), manifest.items.len())));
    }
    let train_idx = manifest.indices(Split::Train);
    let val_idx = manifest.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::contract("train split is empty"));
    }
    let mut model = SimMim::new(&run.model)?;
    let mut state = OptimState::new(model.params(), run.weight_decay);
    let per_epoch = train_idx.len().div_ceil(run.batch_size);
    let total_steps = run.max_steps.unwrap_or(run.epochs * per_epoch);
    let epochs = total_steps.div_ceil(per_epoch);
    let schedule = Schedule {
        base_lr: run.base_lr,
        min_lr: run.min_lr,
        warmup_fraction: ((run.warmup_epochs * per_epoch) as f64 / total_steps as f64).min(1.0),
    };

    let mut writer = out.map(RunWriter::new).transpose()?;
    if let Some(w) = &writer {
        let mut masks = String::new();
        for i in 0..data.len() {
            let _ = writeln!(masks, "{i}\t{}", ItemMask::for_eval(run.mask, &run.model, run.seed, i)?.spec());
        }
        w.write("masks.txt", &masks)?;
    }
    let sample_item = val_idx.first().or(train_idx.first()).copied().expect("non-empty");

    let mut rows = Vec::with_capacity(epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut best_val = f64::NEG_INFINITY;
    let mut step = 0;
    for epoch in 1..=epochs {
        let mut norms = Vec::new();
        let mut lr = 0.0;
        for batch in epoch_order(&train_idx, run.seed, epoch).chunks(run.batch_size) {
            if step == total_steps {
                break;
            }
            lr = lr_at(step as f64 / total_steps as f64, &schedule);
            let results = ordered_map(batch, |&i| {
                let aug_seed = derive_seed(derive_seed(run.seed ^ AUG_STREAM, epoch as u64), i as u64);
                let target = augment(&data[i], run.augment, aug_seed);
                let mask = ItemMask::for_training(run.mask, &run.model, run.seed, epoch, i)?;
                loss_and_grads(&model, &target, &mask, run.loss_mode)
            });
            let scale = 1.0 / batch.len() as f64;
            let params = model.params_mut();
            params.zero_grad();
            let mut loss = 0.0;
            for r in results {
                let (l, grads) = r?;
                loss += l * scale;
                for (k, g) in grads.iter().enumerate() {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    params.get_mut(ParamId(k)).accumulate_grad(&scaled)?;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training { step: step + 1, message: format!("non-finite loss {loss}") });
            }
            let norm = grad_norm(params)?;
            state.lr = lr;
            adamw_step(params, &mut state)?;
            step += 1;
            norms.push(norm);
            steps.push(StepRecord { step, epoch, loss, grad_norm: norm, lr });
            if let Some(w) = &mut writer {
                let _ = writeln!(
                    w.log,
                    "step {step} epoch {epoch} loss {loss:.6e} grad_norm {norm:.6e} lr {lr:.6e}"
                );
            }
        }
        let (train_loss, train_ssim) = evaluate(&model, data, &train_idx, run)?;
        let (val_loss, val_ssim) = evaluate(&model, data, &val_idx, run)?;
        let row = MetricsRow {
            epoch,
            train_loss,
            val_loss,
            train_ssim,
            val_ssim,
            grad_norm: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            lr,
        };
        rows.push(row);
        if let Some(w) = &mut writer {
            w.write("metrics.csv", &metrics_csv(&rows))?;
            w.write("train.log", &w.log.clone())?;
            let last = epoch == epochs;
            if epoch % run.checkpoint_every == 0 || last {
                w.checkpoint(&model, &format!("epoch-{epoch:04}.ckpt"), true, run.keep_checkpoints)?;
            }
            if val_ssim.is_finite() && val_ssim > best_val {
                best_val = val_ssim;
                w.checkpoint(&model, "best.ckpt", false, run.keep_checkpoints)?;
            }
            if epoch % run.sample_every == 0 || last || epoch == 1 {
                let mask = ItemMask::for_eval(run.mask, &run.model, run.seed, sample_item)?;
                let strip = sample_strip(&model, &data[sample_item], &mask)?;
                save_grayscale(&strip, &w.dir.join("samples").join(format!("epoch-{epoch:04}.png")))?;
            }
        }
    }
    let checkpoints = writer.map(|w| w.saved).unwrap_or_default();
    Ok(TrainOutcome { rows, steps, model, checkpoints })
}

/// True when, over the last `window` rows, validation loss moved by less
/// than 1% while training loss moved by more than 5% (relative to the
/// first row of the window).
pub fn detect_stagnation(rows: &[MetricsRow], window: usize) -> Result<bool> {
    if window < 2 {
        return Err(Error::contract(format!("stagnation window {window} must be at least 2")));
    }
    if rows.len() < window {
        return Err(Error::contract(format!("{} rows for a window of {window}", rows.len())));
    }
    let tail = &rows[rows.len() - window..];
    let rel = |a: f64, b: f64| (b - a).abs() / a.abs().max(f64::MIN_POSITIVE);
    let (first, last) = (&tail[0], &tail[window - 1]);
    Ok(rel(first.val_loss, last.val_loss) < 0.01 && rel(first.train_loss, last.train_loss) > 0.05)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_items, DataKind, SampleSpec};

    fn row(epoch: usize, train_loss: f64, val_loss: f64) -> MetricsRow {
        MetricsRow { epoch, train_loss, val_loss, train_ssim: 0.0, val_ssim: 0.0, grad_norm: 0.0, lr: 0.0 }
    }

    #[test]
    fn stagnation_rule() {
        let co: Vec<_> = (0..5).map(|e| row(e, 1.0 / (e + 1) as f64, 1.0 / (e + 1) as f64)).collect();
        assert!(!detect_stagnation(&co, 3).unwrap());
        let flat: Vec<_> = (0..5).map(|e| row(e, 0.5f64.powi(e as i32), 0.3)).collect();
        assert!(detect_stagnation(&flat, 3).unwrap());
        assert!(detect_stagnation(&flat, 1).is_err());
        assert!(detect_stagnation(&flat[..2], 3).is_err());
    }

    fn tiny_run() -> TrainRunConfig {
        let mut model = ModelConfig::preset("grad-swin").unwrap();
        model.image_size = 32;
        model.seed = 3;
        let mut run = TrainRunConfig::new(model);
        run.epochs = 2;
        run.seed = 3;
        run
    }

    fn tiny_data(n: usize) -> (DatasetManifest, Vec<Image>) {
        let manifest = DatasetManifest::phantoms(n, 3).unwrap();
        let spec = SampleSpec { image_size: 32, kind: DataKind::Kspace, n_coils: 4 };
        let data = load_items(&manifest, &spec).unwrap();
        (manifest, data)
    }

    #[test]
    fn one_epoch_bookkeeping() {
        let mut run = tiny_run();
        run.epochs = 1;
        run.warmup_epochs = 0;
        let (manifest, data) = tiny_data(2);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&run, &manifest, &data, Some(dir.path())).unwrap();
        assert_eq!(out.rows.len(), 1);
        assert!(!out.checkpoints.is_empty());
        assert!(out.rows[0].val_loss.is_nan());
        assert_eq!(out.steps.len(), 2);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(dir.path().join("samples/epoch-0001.png").exists());
    }

    #[test]
    fn training_is_deterministic_and_eval_is_pure() {
        let run = tiny_run();
        let (manifest, data) = tiny_data(5);
        let a = train(&run, &manifest, &data, None).unwrap();
        let b = train(&run, &manifest, &data, None).unwrap();
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
        assert_eq!(a.model.params().checksum(), b.model.params().checksum());
        let before = a.model.params().checksum();
        evaluate(&a.model, &data, &manifest.indices(Split::Val), &run).unwrap();
        assert_eq!(a.model.params().checksum(), before);
        assert!(a.rows.iter().all(|r| r.grad_norm.is_finite()));
    }

    #[test]
    fn max_steps_truncates() {
        let mut run = tiny_run();
        run.max_steps = Some(5);
        let (manifest, data) = tiny_data(5);
        let out = train(&run, &manifest, &data, None).unwrap();
        assert_eq!(out.steps.len(), 5);
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.steps[0].lr, 0.0);
    }

    #[test]
    fn line_mask_training_runs() {
        let mut run = tiny_run();
        run.mask = MaskPlan::Line { acceleration: 4, center_fraction: 0.125 };
        run.epochs = 1;
        run.warmup_epochs = 0;
        let (manifest, data) = tiny_data(3);
        let out = train(&run, &manifest, &data, None).unwrap();
        assert!(out.rows[0].train_loss.is_finite());
    }

    #[test]
    fn identity_prediction_scores_perfectly() {
        let (_, data) = tiny_data(2);
        let model = ModelConfig::preset("grad-swin").unwrap();
        let model = ModelConfig { image_size: 32, ..model };
        let mask = ItemMask::for_eval(MaskPlan::Patch { ratio: 0.5 }, &model, 1, 0).unwrap();
        for mode in [LossMode::MaskedOnly, LossMode::Full] {
            let s = score(&data[0], &data[0], &mask, mode).unwrap();
            assert_eq!((s.l1, s.ssim, s.rmse), (0.0, 1.0, 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let mut run = tiny_run();
        run.warmup_epochs = 2;
        assert!(run.validate().is_err());
        let mut run = tiny_run();
        run.mask = MaskPlan::Patch { ratio: 0.0 };
        assert!(run.validate().is_err());
        run.loss_mode = LossMode::Full;
        assert!(run.validate().is_ok());
    }
}
