use std::sync::Arc;

use super::kernels::{mm, mm_nt, mm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Gather index that produces a zero instead of reading the input.
pub const GATHER_ZERO: usize = usize::MAX;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// Batched product; `b` is read transposed when `trans_b` is set.
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var, plane: usize },
    Scale(Var, f64),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Abs(Var),
    Conv2d { x: Var, w: Var, stride: usize },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Reshape(Var),
    ReplaceRows { x: Var, token: Var, flags: Arc<Vec<bool>> },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended as operations run, so every input of a node was
/// created before it; backward walks the list once from the end.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well formed")
    }

    /// Records `t` as an input; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = mm(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, false)
    }

    /// `[B,m,k] x [B,n,k]ᵀ -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, true)
    }

    fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (if trans_b { sa[2] != sb[2] } else { sa[2] != sb[1] });
        if bad {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let ci = if trans_b { mm_nt(ai, bi, m, k, n) } else { mm(ai, bi, m, k, n) };
            value.extend_from_slice(&ci);
        }
        let rg = self.rg(a) || self.rg(b);
        let op = Op::BatchMatMul { a, b, batch, m, k, n, trans_b };
        Ok(self.push(vec![batch, m, n], value, rg, op))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias [D]` to every row of `x [.., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let d = *sx.last().unwrap_or(&0);
        if sb != [d] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), value, rg, Op::AddBias { x, bias }))
    }

    /// Adds `bias [C]` to each channel plane of `x [C,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(Error::shape("add_channel_bias", sx, sb));
        }
        let plane = sx[1] * sx[2];
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(plane)
            .zip(b)
            .flat_map(|(p, &b)| p.iter().map(move |v| v + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), value, rg, Op::AddChannelBias { x, bias, plane }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Scale(x, c))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    value[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    value[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, value, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Normalises each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &sx, self.shape(p)));
            }
        }
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(sx, value, rg, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v * std_normal_cdf(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.abs()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Abs(x))
    }

    /// Valid cross-correlation of `x [Cin,H,W]` with `w [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if stride == 0 || k > h || k > wd || (h - k) % stride != 0 || (wd - k) % stride != 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (oh, ow) = ((h - k) / stride + 1, (wd - k) / stride + 1);
        let (xv, wv) = (self.value(x), self.value(w));
        let mut value = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let xrow = (ci * h + oy * stride + ky) * wd + kx;
                            let orow = (co * oh + oy) * ow;
                            for ox in 0..ow {
                                value[orow + ox] += wt * xv[xrow + ox * stride];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![cout, oh, ow], value, rg, Op::Conv2d { x, w, stride }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    ///
    /// Covers permutations, window partitioning, cyclic shifts, padding and
    /// pixel shuffles.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= n) {
            return Err(Error::contract(format!("gather index {bad} out of range {n}")));
        }
        let xv = self.value(x);
        let value = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { xv[i] })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Gather { x, index }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let index = super::permute_index(&shape, axes)?;
        let out: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.gather(x, Arc::new(index), &out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Rows of `x [N,D]` with `flags[r]` set are replaced by `token [D]`.
    pub fn replace_rows(&mut self, x: Var, token: Var, flags: Arc<Vec<bool>>) -> Result<Var> {
        let (sx, st) = (self.shape(x), self.shape(token));
        if sx.len() != 2 || st != [sx[1]] || flags.len() != sx[0] {
            return Err(Error::shape("replace_rows", sx, st));
        }
        let d = sx[1];
        let t = self.value(token);
        let value = self
            .value(x)
            .chunks(d)
            .zip(flags.iter())
            .flat_map(|(row, &f)| if f { t } else { row }.iter().copied())
            .collect();
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(sx.to_vec(), value, rg, Op::ReplaceRows { x, token, flags }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not a node of this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    send(a, mm_nt(gy, self.value(b), m, n, k));
                }
                if self.rg(b) {
                    send(b, mm_tn(self.value(a), gy, k, m, n));
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for i in 0..batch {
                    let gi = &gy[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // C = A Bᵀ with B [n,k]: dA = dC B, dB = dCᵀ A.
                        ga.extend(mm(gi, bi, m, n, k));
                        gb.extend(mm_tn(gi, ai, n, m, k));
                    } else {
                        ga.extend(mm_nt(gi, bi, m, n, k));
                        gb.extend(mm_tn(ai, gi, k, m, n));
                    }
                }
                send(a, ga);
                send(b, gb);
            }
            &Op::Add(a, b) => {
                send(a, gy.to_vec());
                send(b, gy.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, gy.to_vec());
                send(b, gy.iter().map(|g| -g).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                send(a, gy.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(b, gy.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            &Op::AddBias { x, bias } => {
                let d = self.value(bias).len();
                let mut gb = vec![0.0; d];
                for row in gy.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
                }
                send(x, gy.to_vec());
                send(bias, gb);
            }
            &Op::AddChannelBias { x, bias, plane } => {
                let gb = gy.chunks(plane).map(|p| p.iter().sum()).collect();
                send(x, gy.to_vec());
                send(bias, gb);
            }
            &Op::Scale(x, c) => send(x, gy.iter().map(|g| g * c).collect()),
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                send(x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let g = self.value(*gamma);
                let d = g.len();
                let mut gx = vec![0.0; gy.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (r, inv) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gyr, xh) = (&gy[span.clone()], &xhat[span.clone()]);
                    let dxhat: Vec<f64> = gyr.iter().zip(g).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        gg[j] += gyr[j] * xh[j];
                        gb[j] += gyr[j];
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let gx = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                send(x, gx);
            }
            &Op::Abs(x) => {
                let xv = self.value(x);
                let gx = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                    .collect();
                send(x, gx);
            }
            &Op::Conv2d { x, w, stride } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let (xv, wv) = (self.value(x), self.value(w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for co in 0..cout {
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((co * cin + ci) * k + ky) * k + kx;
                                let wt = wv[widx];
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let xrow = (ci * h + oy * stride + ky) * wd + kx;
                                    let orow = (co * oh + oy) * ow;
                                    for ox in 0..ow {
                                        let g = gy[orow + ox];
                                        acc += g * xv[xrow + ox * stride];
                                        gx[xrow + ox * stride] += g * wt;
                                    }
                                }
                                gw[widx] += acc;
                            }
                        }
                    }
                }
                send(x, gx);
                send(w, gw);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (g, &i) in gy.iter().zip(index.iter()) {
                    if i != GATHER_ZERO {
                        gx[i] += g;
                    }
                }
                send(*x, gx);
            }
            &Op::Reshape(x) => send(x, gy.to_vec()),
            Op::ReplaceRows { x, token, flags } => {
                let d = self.value(*token).len();
                let mut gx = gy.to_vec();
                let mut gt = vec![0.0; d];
                for (row, &f) in gx.chunks_mut(d).zip(flags.iter()) {
                    if f {
                        gt.iter_mut().zip(row.iter()).for_each(|(t, g)| *t += g);
                        row.fill(0.0);
                    }
                }
                send(*x, gx);
                send(*token, gt);
            }
            &Op::Sum(x) => send(x, vec![gy[0]; self.value(x).len()]),
        }
    }
}
