//! Single-channel real image, row-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape("image", &[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("non-empty image")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data).expect("non-empty image")
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Divides by the maximum; an all-zero (or non-positive) image is returned unchanged.
    pub fn normalized_by_max(&self) -> Self {
        let m = self.max();
        if m > 0.0 {
            self.map(|v| v / m)
        } else {
            self.clone()
        }
    }

    /// Places equal-height images left to right with `gap` columns of
    /// `fill` between neighbours.
    pub fn hconcat(images: &[Image], gap: usize, fill: f64) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::contract("hconcat needs at least one image"));
        };
        let h = first.height;
        if let Some(bad) = images.iter().find(|i| i.height != h) {
            return Err(Error::shape("hconcat", &[h], &[bad.height]));
        }
        let w = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = Image::filled(h, w, fill);
        let mut x0 = 0;
        for img in images {
            for r in 0..h {
                for c in 0..img.width {
                    out.set(r, x0 + c, img.get(r, c));
                }
            }
            x0 += img.width + gap;
        }
        Ok(out)
    }

    pub fn same_dims(&self, other: &Image, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hconcat_layout() {
        let a = Image::filled(2, 1, 0.25);
        let b = Image::filled(2, 2, 0.5);
        let out = Image::hconcat(&[a, b], 4, 1.0).unwrap();
        assert_eq!(out.dims(), (2, 7));
        assert_eq!(&out.data()[..7], &[0.25, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5]);
        assert!(Image::hconcat(&[Image::zeros(2, 2), Image::zeros(3, 2)], 4, 1.0).is_err());
        assert!(Image::hconcat(&[], 4, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }
}
