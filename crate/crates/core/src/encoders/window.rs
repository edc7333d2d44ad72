//! Window partitioning, cyclic shifts and the shifted-window attention mask.
//!
//! Everything here is an index map over row-major `[H, W, D]` token grids,
//! so the tape handles it through `gather`.

use std::sync::Arc;

use super::layers::Attention;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Logit offset for forbidden token pairs.
pub const MASK_VALUE: f64 = -1e9;

fn check_grid(op: &str, h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
        return Err(Error::contract(format!("{op}: {h}x{w} grid not divisible by window {window}")));
    }
    Ok(())
}

/// Source token (row-major) of each position in the partitioned layout:
/// windows in lexicographic order, tokens row-major inside each window.
pub fn partition_order(h: usize, w: usize, window: usize) -> Result<Vec<usize>> {
    check_grid("window_partition", h, w, window)?;
    let mut order = Vec::with_capacity(h * w);
    for wr in 0..h / window {
        for wc in 0..w / window {
            for i in 0..window {
                for j in 0..window {
                    order.push((wr * window + i) * w + wc * window + j);
                }
            }
        }
    }
    Ok(order)
}

/// Source token of each position after rolling the grid by `(-shift, -shift)`.
pub fn shift_order(h: usize, w: usize, shift: usize) -> Vec<usize> {
    (0..h * w)
        .map(|t| ((t / w + shift) % h) * w + (t % w + shift) % w)
        .collect()
}

fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (dst, &src) in order.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Expands a token order into an element index over rows of width `d`.
pub fn expand_rows(order: &[usize], d: usize) -> Vec<usize> {
    order.iter().flat_map(|&t| t * d..(t + 1) * d).collect()
}

/// Token orders for "shift then partition" and its inverse.
pub fn window_orders(h: usize, w: usize, window: usize, shift: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if shift >= window {
        return Err(Error::contract(format!("shift {shift} must be below window {window}")));
    }
    let part = partition_order(h, w, window)?;
    let rolled = shift_order(h, w, shift);
    let forward: Vec<usize> = part.iter().map(|&p| rolled[p]).collect();
    let inverse = invert(&forward);
    Ok((forward, inverse))
}

/// `[H, W, D]` to `[nW, window², D]`.
pub fn window_partition(tape: &mut Tape, x: Var, window: usize) -> Result<Var> {
    let (h, w, d) = grid_dims(tape, x, "window_partition")?;
    let order = partition_order(h, w, window)?;
    let n = (h / window) * (w / window);
    tape.gather(x, Arc::new(expand_rows(&order, d)), &[n, window * window, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(tape: &mut Tape, windows: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("window_reverse", &shape, &[0, 0, 0]));
    }
    let window = (shape[1] as f64).sqrt().round() as usize;
    if window * window != shape[1] || shape[0] * shape[1] != h * w {
        return Err(Error::shape("window_reverse", &shape, &[h, w]));
    }
    let inv = invert(&partition_order(h, w, window)?);
    tape.gather(windows, Arc::new(expand_rows(&inv, shape[2])), &[h, w, shape[2]])
}

/// Rolls an `[H, W, D]` grid by `(-shift, -shift)`.
pub fn cyclic_shift(tape: &mut Tape, x: Var, shift: usize) -> Result<Var> {
    let (h, w, d) = grid_dims(tape, x, "cyclic_shift")?;
    let order = shift_order(h, w, shift % h.min(w).max(1));
    tape.gather(x, Arc::new(expand_rows(&order, d)), &[h, w, d])
}

/// Rolls an `[H, W, D]` grid by `(+shift, +shift)`.
pub fn reverse_cyclic_shift(tape: &mut Tape, x: Var, shift: usize) -> Result<Var> {
    let (h, w, d) = grid_dims(tape, x, "cyclic_shift")?;
    let order = invert(&shift_order(h, w, shift % h.min(w).max(1)));
    tape.gather(x, Arc::new(expand_rows(&order, d)), &[h, w, d])
}

fn grid_dims(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [h, w, d] => Ok((h, w, d)),
        ref s => Err(Error::shape(op, s, &[0, 0, 0])),
    }
}

/// Additive `[nW, T, T]` attention bias for shifted windows, or `None`
/// when `shift == 0`.
///
/// In the rolled frame each axis is cut into `[0, n-window)`,
/// `[n-window, n-shift)` and `[n-shift, n)`; the 3×3 combinations label
/// regions that were not adjacent before the roll. Pairs with different
/// labels inside a window get [`MASK_VALUE`].
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize) -> Result<Option<Vec<f64>>> {
    check_grid("shifted_window_mask", h, w, window)?;
    if shift >= window {
        return Err(Error::contract(format!("shift {shift} must be below window {window}")));
    }
    if shift == 0 {
        return Ok(None);
    }
    let band = |i: usize, n: usize| -> usize {
        if i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let labels: Vec<usize> = (0..h * w).map(|t| band(t / w, h) * 3 + band(t % w, w)).collect();
    let order = partition_order(h, w, window)?;
    let t = window * window;
    let mut mask = Vec::with_capacity(order.len() * t);
    for win in order.chunks(t) {
        for &a in win {
            for &b in win {
                mask.push(if labels[a] == labels[b] { 0.0 } else { MASK_VALUE });
            }
        }
    }
    Ok(Some(mask))
}

/// Windowed multi-head self-attention on an `[H, W, D]` grid: roll by
/// `(-shift, -shift)`, attend inside each window (masking pairs from
/// different pre-roll regions), roll back.
pub fn shifted_window_attention(
    tape: &mut Tape,
    params: &[Var],
    attn: &Attention,
    x: Var,
    window: usize,
    shift: usize,
) -> Result<Var> {
    let (h, w, d) = grid_dims(tape, x, "shifted_window_attention")?;
    let (fwd, inv) = window_orders(h, w, window, shift)?;
    let mask = shifted_window_mask(h, w, window, shift)?;
    let groups = (h / window) * (w / window);
    let rows = tape.gather(x, Arc::new(expand_rows(&fwd, d)), &[h * w, d])?;
    let out = attn.forward(tape, params, rows, groups, mask.as_deref())?;
    tape.gather(out, Arc::new(expand_rows(&inv, d)), &[h, w, d])
}
