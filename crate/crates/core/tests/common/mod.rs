#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use mimk::rng::SplitMix64;
use mimk::tensor::{Tape, Tensor, Var, GATHER_ZERO};
use mimk::Result;

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// A differentiable op wrapped into a scalar function of its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

/// Reduces `y` to a scalar through fixed, position-dependent weights so
/// every output element contributes a distinct gradient.
pub fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    let w = tape.constant(&shape, w)?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), f: Box::new(f) }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], |t, v| {
            let y = t.bmm(v[0], v[1])?;
            project(t, y)
        }),
        case("bmm_nt", &[&[2, 3, 4], &[2, 5, 4]], |t, v| {
            let y = t.bmm_nt(v[0], v[1])?;
            project(t, y)
        }),
        case("add", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        }),
        case("add_bias", &[&[3, 4], &[4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y)
        }),
        case("add_channel_bias", &[&[2, 3, 3], &[2]], |t, v| {
            let y = t.add_channel_bias(v[0], v[1])?;
            project(t, y)
        }),
        case("scale", &[&[3, 4]], |t, v| {
            let y = t.scale(v[0], -1.75);
            project(t, y)
        }),
        case("softmax_rows", &[&[3, 4]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y)
        }),
        case("softmax_cols", &[&[3, 4]], |t, v| {
            let y = t.softmax(v[0], 0)?;
            project(t, y)
        }),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        }),
        case("gelu", &[&[3, 4]], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y)
        }),
        case("abs", &[&[3, 4]], |t, v| {
            let y = t.abs(v[0]);
            project(t, y)
        }),
        case("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 1)?;
            project(t, y)
        }),
        case("conv2d_stride2", &[&[2, 5, 5], &[3, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 2)?;
            project(t, y)
        }),
        case("gather", &[&[6]], |t, v| {
            let y = t.gather(v[0], Arc::new(vec![5, 0, GATHER_ZERO, 2, 2, 1, GATHER_ZERO, 4]), &[2, 4])?;
            project(t, y)
        }),
        case("permute", &[&[2, 3, 4]], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            project(t, y)
        }),
        case("reshape", &[&[2, 3, 4]], |t, v| {
            let y = t.reshape(v[0], &[6, 4])?;
            project(t, y)
        }),
        case("replace_rows", &[&[4, 3], &[3]], |t, v| {
            let y = t.replace_rows(v[0], v[1], Arc::new(vec![true, false, true, false]))?;
            project(t, y)
        }),
        case("sum", &[&[3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        }),
        case("mean", &[&[3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
    ]
}

/// Inputs drawn uniformly from [-1, 1].
pub fn random_inputs(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = SplitMix64::new(seed);
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
        })
        .collect()
}

pub fn mimk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mimk"))
}

pub fn run_mimk(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = mimk();
    cmd.args(args);
    if let Some(n) = threads {
        cmd.env("MIMK_THREADS", n.to_string());
    }
    cmd.output().expect("spawn mimk")
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A short tiny-swin run on a handful of phantoms.
pub const SMALL_RUN: &str = "\
preset = tiny-swin
n_phantoms = 6
epochs = 2
warmup_epochs = 1
seed = 11
";
