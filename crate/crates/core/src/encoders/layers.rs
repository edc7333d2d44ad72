//! Parameterised building blocks shared by both encoders and the head.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// `y = x W (+ b)` on `[N, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut SplitMix64) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::trunc_normal(&[fan_in, fan_out], INIT_STD, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight.0])?;
        match self.bias {
            Some(b) => tape.add_bias(y, p[b.0]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::filled(&[dim], 1.0)),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma.0], p[self.beta.0], LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Multi-head self-attention over groups of tokens.
///
/// Input is `[G·T, D]` holding `G` independent groups (windows) of `T`
/// tokens each; attention never crosses groups.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::contract(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `bias`, when given, is an additive `[G, T, T]` term applied to every
    /// head's attention logits (use large negatives to forbid pairs).
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, groups: usize, bias: Option<&[f64]>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || groups == 0 || !shape[0].is_multiple_of(groups) {
            return Err(Error::shape("attention", &shape, &[groups, self.dim]));
        }
        let t = shape[0] / groups;
        let (h, d) = (self.heads, self.dim);
        let dh = d / h;
        let qkv = self.qkv.forward(tape, p, x)?;

        let split = |part: usize| -> Vec<usize> {
            let mut idx = Vec::with_capacity(groups * t * d);
            for g in 0..groups {
                for head in 0..h {
                    for tok in 0..t {
                        let base = (g * t + tok) * 3 * d + part * d + head * dh;
                        idx.extend(base..base + dh);
                    }
                }
            }
            idx
        };
        let hs = [groups * h, t, dh];
        let q = tape.gather(qkv, Arc::new(split(0)), &hs)?;
        let k = tape.gather(qkv, Arc::new(split(1)), &hs)?;
        let v = tape.gather(qkv, Arc::new(split(2)), &hs)?;

        let scores = tape.bmm_nt(q, k)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(bias) = bias {
            if bias.len() != groups * t * t {
                return Err(Error::shape("attention_bias", &[groups, t, t], &[bias.len()]));
            }
            let mut expanded = Vec::with_capacity(groups * h * t * t);
            for g in 0..groups {
                for _ in 0..h {
                    expanded.extend_from_slice(&bias[g * t * t..(g + 1) * t * t]);
                }
            }
            let b = tape.constant(&[groups * h, t, t], expanded)?;
            scores = tape.add(scores, b)?;
        }
        let attn = tape.softmax(scores, 2)?;
        let out = tape.bmm(attn, v)?;

        let mut merge = Vec::with_capacity(groups * t * d);
        for g in 0..groups {
            for tok in 0..t {
                for head in 0..h {
                    let base = ((g * h + head) * t + tok) * dh;
                    merge.extend(base..base + dh);
                }
            }
        }
        let out = tape.gather(out, Arc::new(merge), &[groups * t, d])?;
        self.proj.forward(tape, p, out)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: f64, rng: &mut SplitMix64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, rng),
        })
    }

    /// Runs the block on `[N, D]` tokens. `to_groups` maps the normalised
    /// tokens into `[G·T, D]` attention groups and `from_groups` maps the
    /// attention output back; both are plain index maps.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        groups: usize,
        to_groups: Option<&Arc<Vec<usize>>>,
        from_groups: Option<&Arc<Vec<usize>>>,
        bias: Option<&[f64]>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let h = self.norm1.forward(tape, p, x)?;
        let h = match to_groups {
            Some(idx) => tape.gather(h, idx.clone(), &shape)?,
            None => h,
        };
        let h = self.attn.forward(tape, p, h, groups, bias)?;
        let h = match from_groups {
            Some(idx) => tape.gather(h, idx.clone(), &shape)?,
            None => h,
        };
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(x, h)
    }
}
