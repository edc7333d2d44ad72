use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;

/// 2-D complex array (k-space or complex image), split real/imaginary
/// storage, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexGrid {
    pub fn new(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("empty grid {height}x{width}")));
        }
        let n = height * width;
        if re.len() != n || im.len() != n {
            return Err(Error::shape("complex_grid", &[height, width], &[re.len(), im.len()]));
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(Error::contract("complex grid entries must be finite"));
        }
        Ok(Self { height, width, re, im })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self::new(height, width, vec![0.0; n], vec![0.0; n]).expect("non-empty grid")
    }

    pub fn from_real(img: &Image) -> Self {
        let (h, w) = img.dims();
        Self::new(h, w, img.data().to_vec(), vec![0.0; h * w]).expect("finite image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn get(&self, r: usize, c: usize) -> (f64, f64) {
        let i = r * self.width + c;
        (self.re[i], self.im[i])
    }

    pub fn set(&mut self, r: usize, c: usize, value: (f64, f64)) {
        let i = r * self.width + c;
        self.re[i] = value.0;
        self.im[i] = value.1;
    }

    pub fn magnitude(&self) -> Image {
        let data = self.re.iter().zip(&self.im).map(|(a, b)| a.hypot(*b)).collect();
        Image::new(self.height, self.width, data).expect("same dims")
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }

    /// Multiplies every entry by `e^{iθ}`.
    pub fn rotate_phase(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let mut out = self.clone();
        for (r, i) in out.re.iter_mut().zip(out.im.iter_mut()) {
            let (a, b) = (*r, *i);
            *r = a * c - b * s;
            *i = a * s + b * c;
        }
        out
    }

    /// Text form: a `H W` header line, then `H·W` lines of `re im`.
    /// Values use the shortest round-trip decimal representation.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height, self.width);
        for (a, b) in self.re.iter().zip(&self.im) {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty grid text".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad grid header `{header}`"))))
            .collect::<Result<_>>()?;
        let [h, w] = dims[..] else {
            return Err(Error::Format(format!("bad grid header `{header}`")));
        };
        let mut re = Vec::with_capacity(h * w);
        let mut im = Vec::with_capacity(h * w);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace().map(str::parse::<f64>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => {
                    re.push(a);
                    im.push(b);
                }
                _ => return Err(Error::Format(format!("bad grid line `{line}`"))),
            }
        }
        if re.len() != h * w {
            return Err(Error::Format(format!("expected {} entries, found {}", h * w, re.len())));
        }
        Self::new(h, w, re, im)
    }
}
