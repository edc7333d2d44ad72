//! Receive-coil simulation and root-sum-squares combination.

use super::{fft2, fftshift, ComplexGrid};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SplitMix64;

/// Width of each coil's Gaussian sensitivity bump, normalised units.
const COIL_SIGMA: f64 = 0.9;

/// Set of coil images sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSet {
    coils: Vec<ComplexGrid>,
}

impl CoilSet {
    pub fn new(coils: Vec<ComplexGrid>) -> Result<Self> {
        let Some(first) = coils.first() else {
            return Err(Error::contract("coil set is empty"));
        };
        let dims = first.dims();
        if let Some(bad) = coils.iter().find(|c| c.dims() != dims) {
            return Err(Error::shape(
                "coil_set",
                &[dims.0, dims.1],
                &[bad.height(), bad.width()],
            ));
        }
        Ok(Self { coils })
    }

    pub fn coils(&self) -> &[ComplexGrid] {
        &self.coils
    }

    pub fn len(&self) -> usize {
        self.coils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coils.is_empty()
    }

    pub fn map(&self, f: impl Fn(&ComplexGrid) -> Result<ComplexGrid>) -> Result<Self> {
        Self::new(self.coils.iter().map(f).collect::<Result<_>>()?)
    }
}

/// Multiplies `img` by `n_coils` smooth complex sensitivity maps.
///
/// A single coil has uniform unit sensitivity. With more coils, coil `c`
/// has a Gaussian magnitude bump of unit peak centred on the unit circle at
/// angle `2πc/n + φ₀`, and a smooth linear phase ramp with a per-coil
/// offset; `φ₀` and the offsets come from `seed`.
pub fn simulate_coils(img: &Image, n_coils: usize, seed: u64) -> Result<CoilSet> {
    if n_coils < 1 {
        return Err(Error::contract("simulate_coils needs at least one coil"));
    }
    if n_coils == 1 {
        return CoilSet::new(vec![ComplexGrid::from_real(img)]);
    }
    let (h, w) = img.dims();
    let mut rng = SplitMix64::new(seed);
    let rotation = rng.uniform(0.0, std::f64::consts::TAU);
    let mut coils = Vec::with_capacity(n_coils);
    for c in 0..n_coils {
        let angle = std::f64::consts::TAU * c as f64 / n_coils as f64 + rotation;
        let (py, px) = angle.sin_cos();
        let phase0 = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        let mut grid = ComplexGrid::zeros(h, w);
        for r in 0..h {
            let v = (2 * r + 1) as f64 / h as f64 - 1.0;
            for col in 0..w {
                let u = (2 * col + 1) as f64 / w as f64 - 1.0;
                let d2 = (u - px).powi(2) + (v - py).powi(2);
                let mag = (-d2 / (2.0 * COIL_SIGMA * COIL_SIGMA)).exp();
                let phase = phase0 + 0.5 * std::f64::consts::PI * (u * px + v * py);
                let (s, co) = phase.sin_cos();
                let p = img.get(r, col);
                grid.set(r, col, (p * mag * co, p * mag * s));
            }
        }
        coils.push(grid);
    }
    CoilSet::new(coils)
}

/// `out[p] = sqrt(Σ_c |coil_c[p]|²)`.
pub fn rss_combine(coils: &CoilSet) -> Result<Image> {
    let first = coils.coils.first().ok_or_else(|| Error::contract("empty coil set"))?;
    let (h, w) = first.dims();
    let mut acc = vec![0.0; h * w];
    for coil in &coils.coils {
        for ((a, re), im) in acc.iter_mut().zip(coil.re()).zip(coil.im()) {
            *a += re * re + im * im;
        }
    }
    Image::new(h, w, acc.into_iter().map(f64::sqrt).collect())
}

/// `log(1 + |k|)` divided by its maximum; all-zero input stays zero.
pub fn to_log_magnitude(k: &ComplexGrid) -> Image {
    let v = k.magnitude().map(f64::ln_1p);
    v.normalized_by_max()
}

/// Fully sampled multi-coil k-space of `img`: coil images, their FFTs,
/// RSS over coils in k-space, rendered as a centred log-magnitude image.
pub fn kspace_image(img: &Image, n_coils: usize, seed: u64) -> Result<Image> {
    let coils = simulate_coils(img, n_coils, seed)?;
    let kspace = coils.map(fft2)?;
    let rss = rss_combine(&kspace)?;
    Ok(to_log_magnitude(&fftshift(&ComplexGrid::from_real(&rss))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{generate_phantom, PhantomSpec};

    fn random_grid(h: usize, w: usize, rng: &mut SplitMix64) -> ComplexGrid {
        let re = (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let im = (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        ComplexGrid::new(h, w, re, im).unwrap()
    }

    #[test]
    fn single_coil_is_identity() {
        let img = generate_phantom(&PhantomSpec::shepp_logan(32).unwrap());
        let set = simulate_coils(&img, 1, 3).unwrap();
        assert_eq!(set.coils()[0].re(), img.data());
        assert!(set.coils()[0].im().iter().all(|&v| v == 0.0));
        assert_eq!(rss_combine(&set).unwrap(), img);
    }

    #[test]
    fn coils_vanish_where_image_is_zero() {
        let img = generate_phantom(&PhantomSpec::random(32, 4).unwrap());
        let set = simulate_coils(&img, 4, 8).unwrap();
        for coil in set.coils() {
            for (i, &p) in img.data().iter().enumerate() {
                if p == 0.0 {
                    assert_eq!((coil.re()[i], coil.im()[i]), (0.0, 0.0));
                }
            }
        }
        assert_eq!(set, simulate_coils(&img, 4, 8).unwrap());
        assert!(simulate_coils(&img, 0, 8).is_err());
    }

    #[test]
    fn rss_fixtures() {
        let mut rng = SplitMix64::new(2);
        let c = random_grid(4, 4, &mut rng);
        let single = rss_combine(&CoilSet::new(vec![c.clone()]).unwrap()).unwrap();
        for (s, m) in single.data().iter().zip(c.magnitude().data()) {
            assert!((s - m).abs() < 1e-15);
        }

        let pair = rss_combine(&CoilSet::new(vec![c.clone(), c.clone()]).unwrap()).unwrap();
        for (p, m) in pair.data().iter().zip(c.magnitude().data()) {
            assert!((p - std::f64::consts::SQRT_2 * m).abs() < 1e-12);
        }
        assert!(CoilSet::new(vec![]).is_err());
    }

    #[test]
    fn rss_matches_per_pixel_formula() {
        let mut rng = SplitMix64::new(77);
        let coils: Vec<_> = (0..3).map(|_| random_grid(8, 8, &mut rng)).collect();
        let out = rss_combine(&CoilSet::new(coils.clone()).unwrap()).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let mut s = 0.0;
                for coil in &coils {
                    let (a, b) = coil.get(r, c);
                    s += a * a + b * b;
                }
                assert_eq!(out.get(r, c), s.sqrt());
            }
        }
    }

    #[test]
    fn rss_ignores_global_coil_phase() {
        let mut rng = SplitMix64::new(5);
        let coils: Vec<_> = (0..3).map(|_| random_grid(8, 8, &mut rng)).collect();
        let rotated: Vec<_> = coils.iter().enumerate().map(|(i, c)| c.rotate_phase(0.7 * i as f64 + 0.3)).collect();
        let a = rss_combine(&CoilSet::new(coils).unwrap()).unwrap();
        let b = rss_combine(&CoilSet::new(rotated).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_magnitude_fixtures() {
        assert!(to_log_magnitude(&ComplexGrid::zeros(4, 4)).data().iter().all(|&v| v == 0.0));

        let mut k = ComplexGrid::zeros(4, 4);
        k.set(1, 2, (3.0, -4.0));
        let img = to_log_magnitude(&k);
        assert_eq!(img.get(1, 2), 1.0);
        assert_eq!(img.data().iter().filter(|&&v| v != 0.0).count(), 1);

        k.set(0, 0, (1.0, 0.0));
        k.set(0, 1, (2.0, 0.0));
        let img = to_log_magnitude(&k);
        assert!(img.get(0, 1) > img.get(0, 0) && img.get(0, 0) > img.get(3, 3));
    }

    #[test]
    fn kspace_image_is_normalised() {
        let img = generate_phantom(&PhantomSpec::random(32, 1).unwrap());
        let k = kspace_image(&img, 4, 1).unwrap();
        assert_eq!(k.max(), 1.0);
        assert!(k.min() >= 0.0);
        // DC term lands at the centre after the shift.
        assert_eq!(k.get(16, 16), 1.0);
    }
}
