//! SSIM, RMSE, gradient norm and the per-epoch metrics CSV.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::contract(format!("ssim window {} must be odd and >= 3", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.data_range > 0.0) {
            return Err(Error::contract("ssim k1, k2 and data range must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Sums of `v` over every `k × k` window fully inside the image, computed
/// separably (rows, then columns).
fn box_sums(v: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = v[r * w + c..r * w + c + k].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid-region windows, with a uniform window and
/// population (biased) local statistics.
pub fn ssim(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    x.same_dims(y, "ssim")?;
    let (h, w) = x.dims();
    if h < p.window || w < p.window {
        return Err(Error::contract(format!("{h}x{w} image smaller than ssim window {}", p.window)));
    }
    let k = p.window;
    let n = (k * k) as f64;
    let (xd, yd) = (x.data(), y.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { xd.iter().zip(yd).map(|(&a, &b)| f(a, b)).collect() };
    let sx = box_sums(xd, h, w, k);
    let sy = box_sums(yd, h, w, k);
    let sxx = box_sums(&prod(&|a, _| a * a), h, w, k);
    let syy = box_sums(&prod(&|_, b| b * b), h, w, k);
    let sxy = box_sums(&prod(&|a, b| a * b), h, w, k);
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    for i in 0..sx.len() {
        let (mx, my) = (sx[i] / n, sy[i] / n);
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cov = sxy[i] / n - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / sx.len() as f64)
}

pub fn rmse(pred: &Image, target: &Image) -> Result<f64> {
    pred.same_dims(target, "rmse")?;
    let sse: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn mean_abs_error(pred: &Image, target: &Image) -> Result<f64> {
    pred.same_dims(target, "l1")?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Global L2 norm of every parameter gradient.
pub fn grad_norm(params: &ParamStore) -> Result<f64> {
    let mut sum = 0.0;
    for (name, t) in params.iter() {
        let g = t.grad().ok_or_else(|| Error::contract(format!("parameter `{name}` has no gradient")))?;
        sum += g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(sum.sqrt())
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,train_ssim,val_ssim,grad_norm,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_ssim: f64,
    pub val_ssim: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 6] = ["train_loss", "val_loss", "train_ssim", "val_ssim", "grad_norm", "lr"];

    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "epoch" => self.epoch as f64,
            "train_loss" => self.train_loss,
            "val_loss" => self.val_loss,
            "train_ssim" => self.train_ssim,
            "val_ssim" => self.val_ssim,
            "grad_norm" => self.grad_norm,
            "lr" => self.lr,
            _ => return None,
        })
    }

    pub fn to_csv(&self) -> String {
        let vals = [self.train_loss, self.val_loss, self.train_ssim, self.val_ssim, self.grad_norm, self.lr];
        let mut s = self.epoch.to_string();
        for v in vals {
            s.push(',');
            s.push_str(&format_sig6(v));
        }
        s
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad metrics row `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: num(1)?,
            val_loss: num(2)?,
            train_ssim: num(3)?,
            val_ssim: num(4)?,
            grad_norm: num(5)?,
            lr: num(6)?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics csv header mismatch".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::from_csv).collect()
}

/// C `%g` formatting with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..6).contains(&exp) {
        let mant = strip_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
