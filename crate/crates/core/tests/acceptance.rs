//! Acceptance gate. Each test prints one `criterion N PASS|FAIL` line on
//! stderr (unbuffered by the test harness) before asserting.

mod common;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{op_cases, path_str, random_inputs, run_mimk, write_config};
use mimk::data::{
    center_crop, load_grayscale, load_items, split_dataset, DataKind, DatasetManifest, SampleSpec, Split,
};
use mimk::encoders::{shifted_window_attention, shifted_window_mask, Attention};
use mimk::head::{masked_l1_loss, HeadKind, LossMode};
use mimk::image::Image;
use mimk::kspace::{fft2, ifft2, ComplexGrid};
use mimk::masking::{apply_mask_tokens, cartesian_line_mask, random_patch_mask};
use mimk::metrics::{ssim, SsimParams};
use mimk::model::{ModelConfig, SimMim};
use mimk::rng::SplitMix64;
use mimk::tensor::{check_gradients, ParamStore, Tape, Tensor};
use mimk::trainer::{evaluate, load_checkpoint, restore, save_checkpoint, train, TrainRunConfig};

fn report(n: usize, name: &str, pass: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let pass = pass && elapsed <= budget;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} {verdict}: {name} | {detail} | {:.1}s of {}s",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn random_image(h: usize, w: usize, rng: &mut SplitMix64) -> Image {
    Image::from_fn(h, w, |_, _| rng.next_f64())
}

// 1 -------------------------------------------------------------------------

fn model_gradcheck(preset: &str, head: HeadKind) -> f64 {
    let cfg = ModelConfig { head, seed: 5, ..ModelConfig::preset(preset).unwrap() };
    assert_eq!(cfg.image_size, 16);
    let model = SimMim::new(&cfg).unwrap();
    let mut rng = SplitMix64::new(17);
    let img = random_image(16, 16, &mut rng);
    let g = cfg.mask_grid();
    let mask = random_patch_mask(g, g, 0.5, 9).unwrap();
    check_gradients(
        |tape, vars| {
            let x = model.input(tape, &img)?;
            let y = model.forward(tape, vars, x, Some(&mask))?;
            masked_l1_loss(tape, y, &img, &mask, LossMode::MaskedOnly)
        },
        model.params().tensors(),
        1e-6,
    )
    .unwrap()
}

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let mut worst_op = (0.0f64, "");
    for case in op_cases() {
        for seed in 0..5 {
            let err = check_gradients(&case.f, &random_inputs(&case.shapes, seed), 1e-6).unwrap();
            if err > worst_op.0 {
                worst_op = (err, case.name);
            }
        }
    }
    let mut worst_model = (0.0f64, String::new());
    for preset in ["grad-swin", "grad-vit"] {
        for head in [HeadKind::Linear, HeadKind::Conv] {
            let err = model_gradcheck(preset, head);
            if err >= worst_model.0 {
                worst_model = (err, format!("{preset}/{head}"));
            }
        }
    }
    let pass = worst_op.0 < 1e-4 && worst_model.0 < 1e-4;
    let detail = format!(
        "max rel err ops {:.2e} ({}), model {:.2e} ({})",
        worst_op.0, worst_op.1, worst_model.0, worst_model.1
    );
    assert!(report(1, "gradient integrity", pass, &detail, start.elapsed(), Duration::from_secs(120)), "{detail}");
}

// 2 -------------------------------------------------------------------------

fn random_grid(h: usize, w: usize, rng: &mut SplitMix64) -> ComplexGrid {
    let n = h * w;
    let re = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let im = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    ComplexGrid::new(h, w, re, im).unwrap()
}

fn max_abs_diff(a: &ComplexGrid, b: &ComplexGrid) -> f64 {
    a.re().iter()
        .zip(b.re())
        .chain(a.im().iter().zip(b.im()))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_02_fft_correctness() {
    let start = Instant::now();
    let mut rng = SplitMix64::new(2);
    let (mut roundtrip, mut parseval) = (0.0f64, 0.0f64);
    for (h, w) in [(1, 1), (2, 2), (4, 8), (16, 16), (32, 64), (128, 128), (256, 256)] {
        let x = random_grid(h, w, &mut rng);
        let k = fft2(&x).unwrap();
        roundtrip = roundtrip.max(max_abs_diff(&ifft2(&k).unwrap(), &x));
        roundtrip = roundtrip.max(max_abs_diff(&fft2(&ifft2(&x).unwrap()).unwrap(), &x));
        parseval = parseval.max((k.energy() / x.energy() - 1.0).abs());
    }

    let mut delta = ComplexGrid::zeros(4, 4);
    delta.set(0, 0, (1.0, 0.0));
    let k = fft2(&delta).unwrap();
    let delta_ok = k.re().iter().all(|&v| v == 0.25) && k.im().iter().all(|&v| v == 0.0);
    let flat = ComplexGrid::new(4, 4, vec![0.25; 16], vec![0.0; 16]).unwrap();
    let back = ifft2(&flat).unwrap();
    let inverse_ok = max_abs_diff(&back, &delta) == 0.0;

    // Real input gives Hermitian k-space; Hermitian k-space gives a real image.
    let (h, w) = (16, 32);
    let real = ComplexGrid::from_real(&random_image(h, w, &mut rng));
    let k = fft2(&real).unwrap();
    let mut herm = 0.0f64;
    for u in 0..h {
        for v in 0..w {
            let (a, b) = (k.get(u, v), k.get((h - u) % h, (w - v) % w));
            herm = herm.max((a.0 - b.0).abs()).max((a.1 + b.1).abs());
        }
    }
    let imag = ifft2(&k).unwrap().im().iter().map(|v| v.abs()).fold(0.0, f64::max);

    let pass = roundtrip < 1e-10 && parseval <= 1e-9 && delta_ok && inverse_ok && herm < 1e-10 && imag < 1e-10;
    let detail = format!(
        "roundtrip {roundtrip:.1e}, parseval {parseval:.1e}, delta {delta_ok}, inverse {inverse_ok}, hermitian {herm:.1e}, imag {imag:.1e}"
    );
    assert!(report(2, "fft correctness", pass, &detail, start.elapsed(), Duration::from_secs(10)), "{detail}");
}

// 3 -------------------------------------------------------------------------

/// Direct evaluation of the windowed SSIM statistic: every 7x7 window
/// inside the image, population moments, averaged.
fn ssim_per_window(x: &Image, y: &Image) -> f64 {
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let k = 7;
    let (h, w) = x.dims();
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let cells: Vec<(f64, f64)> =
                (0..k).flat_map(|i| (0..k).map(move |j| (r + i, c + j))).map(|(i, j)| (x.get(i, j), y.get(i, j))).collect();
            let mx = cells.iter().map(|p| p.0).sum::<f64>() / n;
            let my = cells.iter().map(|p| p.1).sum::<f64>() / n;
            let vx = cells.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n;
            let vy = cells.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / n;
            let cxy = cells.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / n;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn criterion_03_ssim_oracle() {
    let start = Instant::now();
    let p = SsimParams::default();
    let mut rng = SplitMix64::new(3);
    let (mut oracle, mut symmetry) = (0.0f64, 0.0f64);
    let mut identity = true;
    for i in 0..20 {
        let x = random_image(32, 32, &mut rng);
        // Mix of unrelated and correlated pairs.
        let y = if i % 2 == 0 {
            random_image(32, 32, &mut rng)
        } else {
            Image::from_fn(32, 32, |r, c| 0.7 * x.get(r, c) + 0.3 * rng.next_f64())
        };
        let s = ssim(&x, &y, &p).unwrap();
        oracle = oracle.max((s - ssim_per_window(&x, &y)).abs());
        symmetry = symmetry.max((s - ssim(&y, &x, &p).unwrap()).abs());
        identity &= ssim(&x, &x, &p).unwrap() == 1.0;
    }
    let pass = oracle < 1e-10 && symmetry < 1e-12 && identity;
    let detail = format!("oracle {oracle:.1e}, symmetry {symmetry:.1e}, ssim(x,x)==1 {identity}");
    assert!(report(3, "ssim oracle equivalence", pass, &detail, start.elapsed(), Duration::from_secs(10)), "{detail}");
}

// 4 -------------------------------------------------------------------------

#[test]
fn criterion_04_masking_invariants() {
    let start = Instant::now();
    let mut cardinality = true;
    for (gh, gw) in [(8, 8), (12, 12), (16, 16), (5, 7)] {
        for ratio in [0.0, 0.25, 0.5, 0.75, 1.0] {
            for seed in 0..4 {
                let m = random_patch_mask(gh, gw, ratio, seed).unwrap();
                let want = (ratio * (gh * gw) as f64).round() as usize;
                cardinality &= m.flags().iter().filter(|&&f| f).count() == want;
            }
        }
    }

    let mut rng = SplitMix64::new(4);
    let (n, d) = (64, 5);
    let tokens = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap();
    let token = Tensor::new(vec![d], (0..d).map(|_| rng.normal()).collect()).unwrap();
    let mask = random_patch_mask(8, 8, 0.5, 4).unwrap();
    let mut tape = Tape::new();
    let (tv, mv) = (tape.leaf(&tokens), tape.leaf(&token));
    let out = apply_mask_tokens(&mut tape, tv, &mask, mv).unwrap();
    let out = tape.value(out);
    let mut rows = true;
    for (r, &masked) in mask.flags().iter().enumerate() {
        let got = &out[r * d..(r + 1) * d];
        let want = if masked { token.data() } else { &tokens.data()[r * d..(r + 1) * d] };
        rows &= got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let kept: Vec<usize> = cartesian_line_mask(8, 2, 0.25).unwrap().kept_rows().iter().copied().collect();
    let line = kept == [0, 2, 3, 4, 6];

    let pass = cardinality && rows && line;
    let detail = format!("cardinality {cardinality}, unmasked rows bit-identical {rows}, line rows {kept:?}");
    assert!(report(4, "masking invariants", pass, &detail, start.elapsed(), Duration::from_secs(5)), "{detail}");
}

// 5 -------------------------------------------------------------------------

/// Label each rolled-frame token by the region of the original grid it
/// came from: a pair may attend iff the roll did not separate them, i.e.
/// their rolled offset equals their original offset on both axes.
fn region_oracle(h: usize, w: usize, window: usize, shift: usize) -> Vec<bool> {
    let original = |p: usize, n: usize| (p + shift) % n;
    let mut allowed = Vec::new();
    for wr in 0..h / window {
        for wc in 0..w / window {
            let cells: Vec<(usize, usize)> =
                (0..window).flat_map(|i| (0..window).map(move |j| (wr * window + i, wc * window + j))).collect();
            for &(ra, ca) in &cells {
                for &(rb, cb) in &cells {
                    let same_rows = original(ra, h) as i64 - original(rb, h) as i64 == ra as i64 - rb as i64;
                    let same_cols = original(ca, w) as i64 - original(cb, w) as i64 == ca as i64 - cb as i64;
                    allowed.push(same_rows && same_cols);
                }
            }
        }
    }
    allowed
}

fn attention_output(x: &Tensor, window: usize, shift: usize) -> Vec<f64> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(55);
    let attn = Attention::new(&mut store, "attn", x.shape()[2], 2, &mut rng).unwrap();
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let xv = tape.leaf(x);
    let y = shifted_window_attention(&mut tape, &params, &attn, xv, window, shift).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn criterion_05_shifted_windows() {
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut configs = 0usize;
    for h in 1..=8 {
        for w in 1..=8 {
            for window in [2, 4] {
                if h % window != 0 || w % window != 0 {
                    continue;
                }
                for shift in [0, window / 2] {
                    configs += 1;
                    let oracle = region_oracle(h, w, window, shift);
                    let mask = shifted_window_mask(h, w, window, shift).unwrap();
                    let allowed: Vec<bool> = match mask {
                        Some(m) => m.iter().map(|&v| v == 0.0).collect(),
                        None => vec![true; oracle.len()],
                    };
                    mismatches += allowed.iter().zip(&oracle).filter(|(a, b)| a != b).count()
                        + allowed.len().abs_diff(oracle.len());
                }
            }
        }
    }

    // Shift 0: perturbing one window leaves every other window bit-identical.
    let (h, w, d, window) = (8, 8, 4, 4);
    let mut rng = SplitMix64::new(5);
    let x = Tensor::new(vec![h, w, d], (0..h * w * d).map(|_| rng.normal()).collect()).unwrap();
    let base = attention_output(&x, window, 0);
    let mut bumped = x.clone();
    for r in 0..window {
        for c in 0..window {
            for k in 0..d {
                bumped.data_mut()[(r * w + c) * d + k] += 0.3;
            }
        }
    }
    let out = attention_output(&bumped, window, 0);
    let mut cross = 0.0f64;
    let mut inside = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let delta: f64 = (0..d).map(|k| (out[(r * w + c) * d + k] - base[(r * w + c) * d + k]).abs()).sum();
            if r < window && c < window {
                inside += delta;
            } else {
                cross = cross.max(delta);
            }
        }
    }

    let pass = mismatches == 0 && cross == 0.0 && inside > 0.0;
    let detail = format!("{configs} grid configs, {mismatches} mask mismatches, cross-window effect {cross:e}");
    assert!(report(5, "shifted-window correctness", pass, &detail, start.elapsed(), Duration::from_secs(30)), "{detail}");
}

// 6 -------------------------------------------------------------------------

const SMOOTHING: usize = 25;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_06_overfit_smoke_test() {
    let start = Instant::now();
    let seed = 7;
    let model = ModelConfig { seed, ..ModelConfig::preset("tiny-swin").unwrap() };
    let mut run = TrainRunConfig::new(model);
    run.seed = seed;
    run.max_steps = Some(500);
    run.epochs = 63;
    // Memorisation test: every phantom is a training item.
    let mut manifest = DatasetManifest::phantoms(8, seed).unwrap();
    for item in &mut manifest.items {
        item.split = Split::Train;
    }
    let data = load_items(&manifest, &SampleSpec { image_size: 64, kind: DataKind::Kspace, n_coils: 4 }).unwrap();
    let out = train(&run, &manifest, &data, None).unwrap();

    let losses: Vec<f64> = out.steps.iter().map(|s| s.loss).collect();
    let norms: Vec<f64> = out.steps.iter().map(|s| s.grad_norm).collect();
    assert_eq!(losses.len(), 500);
    let final_ssim = out.rows.last().unwrap().train_ssim;
    let loss_ratio = mean(&losses[losses.len() - SMOOTHING..]) / mean(&losses[..SMOOTHING]);
    let tenth = norms.len() / 10;
    let (gn_first, gn_last) = (mean(&norms[..tenth]), mean(&norms[norms.len() - tenth..]));

    let pass = final_ssim >= 0.95 && loss_ratio < 0.2 && gn_last < gn_first;
    let detail = format!(
        "train ssim {final_ssim:.4} (>= 0.95), smoothed loss ratio {loss_ratio:.3} (< 0.2), grad norm {gn_first:.3} -> {gn_last:.3}"
    );
    assert!(report(6, "overfit smoke test", pass, &detail, start.elapsed(), Duration::from_secs(600)), "{detail}");
}

// 7 -------------------------------------------------------------------------

fn desk_benchmark(preset: &str, manifest: &DatasetManifest, data: &[Image]) -> f64 {
    let seed = 2024;
    let model = ModelConfig { seed, ..ModelConfig::preset(preset).unwrap() };
    let mut run = TrainRunConfig::new(model);
    run.seed = seed;
    run.epochs = 30;
    train(&run, manifest, data, None).unwrap().rows.last().unwrap().val_ssim
}

#[test]
fn criterion_07_encoder_ordering() {
    let start = Instant::now();
    let manifest = DatasetManifest::phantoms(200, 2024).unwrap();
    let data = load_items(&manifest, &SampleSpec { image_size: 64, kind: DataKind::Kspace, n_coils: 4 }).unwrap();
    let swin = desk_benchmark("tiny-swin", &manifest, &data);
    let vit = desk_benchmark("tiny-vit", &manifest, &data);
    let pass = swin >= vit;
    let detail = format!("final val ssim swin {swin:.5} vs vit {vit:.5} (margin {:+.5})", swin - vit);
    assert!(report(7, "encoder ordering", pass, &detail, start.elapsed(), Duration::from_secs(3600)), "{detail}");
}

// 8 -------------------------------------------------------------------------

const DETERMINISM_RUN: &str = "\
preset = tiny-swin
n_phantoms = 10
epochs = 3
batch_size = 2
augment = flip_crop
seed = 8
";

#[test]
fn criterion_08_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", DETERMINISM_RUN);
    let mut csvs = Vec::new();
    let mut ok = true;
    for threads in [1, 4] {
        for rep in 0..2 {
            let out = dir.path().join(format!("t{threads}-{rep}"));
            let o = run_mimk(&["train", "--config", path_str(&cfg), "--out", path_str(&out)], Some(threads));
            ok &= o.status.success();
            csvs.push(fs::read(out.join("metrics.csv")).unwrap_or_default());
        }
    }
    let identical = ok && !csvs[0].is_empty() && csvs.iter().all(|c| *c == csvs[0]);
    let detail = format!("4 runs (MIMK_THREADS 1 and 4, twice each), metrics.csv byte-identical {identical}");
    assert!(report(8, "determinism", identical, &detail, start.elapsed(), Duration::from_secs(600)), "{detail}");
}

// 9 -------------------------------------------------------------------------

fn rgba_rule(dir: &Path) -> bool {
    let path = dir.join("rgba.png");
    let img = image::RgbaImage::from_fn(3, 2, |x, y| image::Rgba([(x * 80 + y * 7) as u8, 200, 13, 77]));
    img.save(&path).unwrap();
    let loaded = load_grayscale(&path).unwrap();
    (0..2).all(|y| (0..3).all(|x| loaded.get(y, x) == f64::from((x * 80 + y * 7) as u8) / 255.0))
}

#[test]
fn criterion_09_pipeline_fixtures() {
    let start = Instant::now();
    let src = Image::from_fn(384, 680, |r, c| (r * 1000 + c) as f64);
    let crop = center_crop(&src, 192).unwrap();
    let crop_ok = crop.dims() == (192, 192) && crop.get(0, 0) == src.get(96, 244) && crop.get(191, 191) == src.get(287, 435);

    let count = |n| {
        let s = split_dataset(n, 1).unwrap();
        (s.iter().filter(|&&x| x == Split::Train).count(), s.iter().filter(|&&x| x == Split::Val).count())
    };
    let splits = (count(100), count(5));
    let split_ok = splits == ((80, 20), (4, 1));

    let dir = tempfile::tempdir().unwrap();
    let rgba_ok = rgba_rule(dir.path());

    let model = ModelConfig { seed: 9, ..ModelConfig::preset("tiny-swin").unwrap() };
    let mut run = TrainRunConfig::new(model.clone());
    run.seed = 9;
    run.epochs = 2;
    run.max_steps = Some(12);
    let manifest = DatasetManifest::phantoms(10, 9).unwrap();
    let data = load_items(&manifest, &SampleSpec { image_size: 64, kind: DataKind::Kspace, n_coils: 4 }).unwrap();
    let trained = train(&run, &manifest, &data, None).unwrap().model;
    let val = manifest.indices(Split::Val);
    let (_, before) = evaluate(&trained, &data, &val, &run).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(trained.params(), &ckpt).unwrap();
    let mut fresh = SimMim::new(&ModelConfig { seed: 1234, ..model }).unwrap();
    restore(fresh.params_mut(), &load_checkpoint(&ckpt).unwrap()).unwrap();
    let (_, after) = evaluate(&fresh, &data, &val, &run).unwrap();
    let ckpt_ok = (before - after).abs() <= 1e-6;

    let pass = crop_ok && split_ok && rgba_ok && ckpt_ok;
    let detail = format!(
        "crop {crop_ok}, splits {splits:?}, rgba red channel {rgba_ok}, checkpoint ssim {before:.8} -> {after:.8}"
    );
    assert!(report(9, "pipeline fixtures", pass, &detail, start.elapsed(), Duration::from_secs(60)), "{detail}");
}

// 10 ------------------------------------------------------------------------

const ABLATION_RUN: &str = "\
preset = tiny-swin
n_phantoms = 10
epochs = 3
seed = 10
";

#[test]
fn criterion_10_ablation_harness() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ablate.cfg", ABLATION_RUN);
    let mut ok = true;
    for rep in ["a", "b"] {
        let o = run_mimk(&["ablate-aug", "--config", path_str(&cfg), "--out", path_str(&dir.path().join(rep))], None);
        ok &= o.status.success();
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap_or_default();
    let csv = String::from_utf8(read("a/ablation.csv")).unwrap();
    let header_ok = csv.lines().next() == Some("epoch,ssim_none,ssim_aug");
    let rows_ok = csv.lines().count() == 1 + 3;
    let svg = String::from_utf8(read("a/ablation.svg")).unwrap();
    let (polylines, legend) = match roxmltree::Document::parse(&svg) {
        Ok(doc) => {
            let texts: Vec<&str> = doc.descendants().filter(|n| n.has_tag_name("text")).filter_map(|n| n.text()).collect();
            (
                doc.descendants().filter(|n| n.has_tag_name("polyline")).count(),
                texts.contains(&"none") && texts.contains(&"flip_crop"),
            )
        }
        Err(_) => (0, false),
    };
    let reproducible = ["none/metrics.csv", "flip_crop/metrics.csv", "ablation.csv"]
        .iter()
        .all(|f| !read(&format!("a/{f}")).is_empty() && read(&format!("a/{f}")) == read(&format!("b/{f}")));

    let pass = ok && header_ok && rows_ok && polylines == 2 && legend && reproducible;
    let detail = format!(
        "csv header {header_ok}, rows == epochs {rows_ok}, polylines {polylines}, legend {legend}, reruns byte-identical {reproducible}"
    );
    assert!(report(10, "ablation harness", pass, &detail, start.elapsed(), Duration::from_secs(7200)), "{detail}");
}
