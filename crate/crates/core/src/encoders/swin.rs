use std::sync::Arc;

use super::config::SwinConfig;
use super::layers::{Block, Linear};
use super::window::{expand_rows, shifted_window_mask, window_orders};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ParamStore, Tape, Var};

/// 2×2 neighbourhood concatenation followed by a bias-free `4D → 2D` map.
///
/// Concatenation order per output token `(i, j)` is `(2i, 2j)`,
/// `(2i+1, 2j)`, `(2i, 2j+1)`, `(2i+1, 2j+1)`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub reduction: Linear,
    grid: (usize, usize),
    dim: usize,
    index: Arc<Vec<usize>>,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, name: &str, h: usize, w: usize, dim: usize, rng: &mut SplitMix64) -> Result<Self> {
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
            return Err(Error::contract(format!("patch merging needs even grid, got {h}x{w}")));
        }
        let mut order = Vec::with_capacity(h * w);
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    order.push((2 * i + dr) * w + 2 * j + dc);
                }
            }
        }
        Ok(Self {
            reduction: Linear::new(store, &format!("{name}.reduction"), 4 * dim, 2 * dim, false, rng),
            grid: (h, w),
            dim,
            index: Arc::new(expand_rows(&order, dim)),
        })
    }

    /// `[H·W, D]` to `[(H/2)·(W/2), 2D]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let (h, w) = self.grid;
        let want = [h * w, self.dim];
        if tape.shape(x) != want {
            return Err(Error::shape("patch_merging", tape.shape(x), &want));
        }
        let cat = tape.gather(x, self.index.clone(), &[h * w / 4, 4 * self.dim])?;
        self.reduction.forward(tape, params, cat)
    }
}

#[derive(Debug, Clone)]
struct SwinBlock {
    block: Block,
    groups: usize,
    to_windows: Arc<Vec<usize>>,
    from_windows: Arc<Vec<usize>>,
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<SwinBlock>,
    merge: Option<PatchMerging>,
}

/// Hierarchical shifted-window encoder. Blocks alternate shift 0 and
/// `window/2`; stages are joined by patch merging.
#[derive(Debug, Clone)]
pub struct SwinEncoder {
    cfg: SwinConfig,
    stages: Vec<Stage>,
}

impl SwinEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SwinConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.window_size;
        let mut grid = cfg.patch.grid();
        let mut stages = Vec::with_capacity(cfg.stage_depths.len());
        for (s, (&depth, &heads)) in cfg.stage_depths.iter().zip(&cfg.heads_per_stage).enumerate() {
            let dim = cfg.stage_dim(s);
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let shift = if b % 2 == 1 { win / 2 } else { 0 };
                let (fwd, inv) = window_orders(grid, grid, win, shift)?;
                blocks.push(SwinBlock {
                    block: Block::new(store, &format!("{name}.stages.{s}.blocks.{b}"), dim, heads, cfg.mlp_ratio, rng)?,
                    groups: (grid / win) * (grid / win),
                    to_windows: Arc::new(expand_rows(&fwd, dim)),
                    from_windows: Arc::new(expand_rows(&inv, dim)),
                    mask: shifted_window_mask(grid, grid, win, shift)?,
                });
            }
            let merge = if s + 1 < cfg.stage_depths.len() {
                let m = PatchMerging::new(store, &format!("{name}.stages.{s}.merge"), grid, grid, dim, rng)?;
                grid /= 2;
                Some(m)
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        Ok(Self { cfg: cfg.clone(), stages })
    }

    pub fn config(&self) -> &SwinConfig {
        &self.cfg
    }

    /// `[N, D]` patch tokens to `[H'·W', D']` features on the final grid.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], tokens: Var) -> Result<Var> {
        let want = [self.cfg.patch.num_tokens(), self.cfg.embed_dim];
        if tape.shape(tokens) != want {
            return Err(Error::shape("swin_forward", tape.shape(tokens), &want));
        }
        let mut x = tokens;
        for stage in &self.stages {
            for b in &stage.blocks {
                x = b.block.forward(
                    tape,
                    params,
                    x,
                    b.groups,
                    Some(&b.to_windows),
                    Some(&b.from_windows),
                    b.mask.as_deref(),
                )?;
            }
            if let Some(m) = &stage.merge {
                x = m.forward(tape, params, x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PatchEmbedConfig;
    use crate::tensor::{check_gradients, Tensor};

    fn desk_cfg() -> SwinConfig {
        SwinConfig {
            stage_depths: vec![2, 2],
            heads_per_stage: vec![2, 4],
            window_size: 4,
            embed_dim: 8,
            mlp_ratio: 2.0,
            patch: PatchEmbedConfig { image_size: 64, patch_size: 4, in_channels: 1, embed_dim: 8 },
            encoder_stride: 8,
        }
    }

    fn run(enc: &SwinEncoder, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x);
        let y = enc.forward(&mut tape, &p, xv).unwrap();
        tape.to_tensor(y)
    }

    #[test]
    fn desk_swin_output_grid() {
        let mut store = ParamStore::new();
        let cfg = desk_cfg();
        let enc = SwinEncoder::new(&mut store, "swin", &cfg, &mut SplitMix64::new(1)).unwrap();
        let mut rng = SplitMix64::new(2);
        let x = Tensor::new(vec![256, 8], (0..256 * 8).map(|_| rng.uniform(-10.0, 10.0)).collect()).unwrap();
        let y = run(&enc, &store, &x);
        assert_eq!(y.shape(), &[64, 16]);
        assert!(y.data().iter().all(|v| v.is_finite()));

        let mut store2 = ParamStore::new();
        let enc2 = SwinEncoder::new(&mut store2, "swin", &cfg, &mut SplitMix64::new(1)).unwrap();
        let y2 = run(&enc2, &store2, &x);
        assert!(y.data().iter().zip(y2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn merging_shape_and_top_left_passthrough() {
        let mut store = ParamStore::new();
        let m = PatchMerging::new(&mut store, "m", 4, 4, 3, &mut SplitMix64::new(0)).unwrap();
        let w = store.get_mut(m.reduction.weight);
        w.data_mut().fill(0.0);
        for k in 0..3 {
            w.data_mut()[k * 6 + k] = 1.0;
        }
        let x = Tensor::new(vec![16, 3], (0..48).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(&x);
        let y = m.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.shape(y), &[4, 6]);
        // Output token (0,1) starts with grid token (0,2); (1,0) with (2,0).
        assert_eq!(&tape.value(y)[6..9], &[6.0, 7.0, 8.0]);
        assert_eq!(&tape.value(y)[12..15], &[24.0, 25.0, 26.0]);
        assert_eq!(&tape.value(y)[3..6], &[0.0, 0.0, 0.0]);
        assert!(PatchMerging::new(&mut store, "odd", 3, 4, 3, &mut SplitMix64::new(0)).is_err());
    }

    #[test]
    fn merging_gradient_check() {
        let mut store = ParamStore::new();
        let m = PatchMerging::new(&mut store, "m", 4, 4, 2, &mut SplitMix64::new(3)).unwrap();
        let mut rng = SplitMix64::new(4);
        let x = Tensor::new(vec![16, 2], (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let w = store.get(m.reduction.weight).clone();
        let err = check_gradients(
            |tape, v| {
                let cat = tape.gather(v[0], m.index.clone(), &[4, 8])?;
                let y = tape.matmul(cat, v[1])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &[x, w],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
