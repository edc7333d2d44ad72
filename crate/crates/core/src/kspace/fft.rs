//! Unitary radix-2 2-D FFT.
//!
//! Rows then columns, each 1-D pass scaled by `1/sqrt(n)`, so the 2-D
//! transform is orthonormal in both directions.

use super::ComplexGrid;
use crate::error::{Error, Result};
use crate::image::Image;

fn check_pow2(grid: &ComplexGrid) -> Result<()> {
    let (h, w) = grid.dims();
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::contract(format!("fft2 needs power-of-two dims, got {h}x{w}")));
    }
    Ok(())
}

struct Plan {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    scale: f64,
}

impl Plan {
    fn new(n: usize) -> Self {
        let half = n / 2;
        let (sin, cos) = (0..half)
            .map(|k| (-2.0 * std::f64::consts::PI * k as f64 / n as f64).sin_cos())
            .unzip();
        Self {
            n,
            cos,
            sin,
            scale: 1.0 / (n as f64).sqrt(),
        }
    }

    /// In-place transform; `inverse` conjugates the twiddles.
    fn run(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        if n == 1 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = (self.cos[k * step], sign * self.sin[k * step]);
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
        for v in re.iter_mut().chain(im.iter_mut()) {
            *v *= self.scale;
        }
    }
}

fn transform(grid: &ComplexGrid, inverse: bool) -> Result<ComplexGrid> {
    check_pow2(grid)?;
    let (h, w) = grid.dims();
    let mut out = grid.clone();
    let (re, im) = out.parts_mut();

    let row_plan = Plan::new(w);
    for r in 0..h {
        let span = r * w..(r + 1) * w;
        row_plan.run(&mut re[span.clone()], &mut im[span], inverse);
    }

    let col_plan = Plan::new(h);
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        col_plan.run(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
    Ok(out)
}

/// Forward unitary 2-D DFT.
pub fn fft2(img: &ComplexGrid) -> Result<ComplexGrid> {
    transform(img, false)
}

/// Inverse unitary 2-D DFT.
pub fn ifft2(k: &ComplexGrid) -> Result<ComplexGrid> {
    transform(k, true)
}

/// Swaps quadrants so the zero frequency sits at `(H/2, W/2)`.
pub fn fftshift(grid: &ComplexGrid) -> ComplexGrid {
    let (h, w) = grid.dims();
    let mut out = ComplexGrid::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            out.set((r + h / 2) % h, (c + w / 2) % w, grid.get(r, c));
        }
    }
    out
}

/// Zero-pads `img` to `size × size`, centred (offset `floor((size - dim)/2)`).
pub fn pad_centered(img: &Image, size: usize) -> Result<Image> {
    let (h, w) = img.dims();
    if h > size || w > size {
        return Err(Error::contract(format!("cannot pad {h}x{w} down to {size}")));
    }
    let (oy, ox) = ((size - h) / 2, (size - w) / 2);
    let mut out = Image::zeros(size, size);
    for r in 0..h {
        for c in 0..w {
            out.set(r + oy, c + ox, img.get(r, c));
        }
    }
    Ok(out)
}
