//! Additive-ellipse phantoms.
//!
//! Geometry is expressed in normalised coordinates: the image spans
//! `[-1, 1]` on both axes, pixel `(r, c)` sits at
//! `u = (2c + 1)/size - 1`, `v = (2r + 1)/size - 1`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians, counter-clockwise.
    pub theta: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (u - self.cx, v - self.cy);
        let x = (dx * c + dy * s) / self.a;
        let y = (-dx * s + dy * c) / self.b;
        x * x + y * y <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub ellipses: Vec<Ellipse>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(size: usize, ellipses: Vec<Ellipse>, seed: u64) -> Result<Self> {
        if size < 16 {
            return Err(Error::contract(format!("phantom size {size} < 16")));
        }
        if ellipses.iter().any(|e| !(e.a > 0.0 && e.b > 0.0)) {
            return Err(Error::contract("ellipse semi-axes must be positive"));
        }
        Ok(Self { size, ellipses, seed })
    }

    /// Modified Shepp-Logan head phantom.
    pub fn shepp_logan(size: usize) -> Result<Self> {
        let deg = std::f64::consts::PI / 180.0;
        #[rustfmt::skip]
        let table = [
            // intensity, a, b, cx, cy, theta(deg)
            ( 1.0, 0.69,   0.92,   0.0,    0.0,     0.0),
            (-0.8, 0.6624, 0.8740, 0.0,   -0.0184,  0.0),
            (-0.2, 0.11,   0.31,   0.22,   0.0,   -18.0),
            (-0.2, 0.16,   0.41,  -0.22,   0.0,    18.0),
            ( 0.1, 0.21,   0.25,   0.0,    0.35,    0.0),
            ( 0.1, 0.046,  0.046,  0.0,    0.1,     0.0),
            ( 0.1, 0.046,  0.046,  0.0,   -0.1,     0.0),
            ( 0.1, 0.046,  0.023, -0.08,  -0.605,   0.0),
            ( 0.1, 0.023,  0.023,  0.0,   -0.606,   0.0),
            ( 0.1, 0.023,  0.046,  0.06,  -0.605,   0.0),
        ];
        let ellipses = table
            .iter()
            .map(|&(intensity, a, b, cx, cy, t)| Ellipse {
                cx,
                cy: -cy,
                a,
                b,
                theta: t * deg,
                intensity,
            })
            .collect();
        Self::new(size, ellipses, 0)
    }

    /// Random anatomy-like phantom: one bright body ellipse with 3 to 7
    /// smaller inclusions of either sign, all drawn from `seed`.
    pub fn random(size: usize, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let mut ellipses = vec![Ellipse {
            cx: rng.uniform(-0.08, 0.08),
            cy: rng.uniform(-0.08, 0.08),
            a: rng.uniform(0.55, 0.85),
            b: rng.uniform(0.55, 0.85),
            theta: rng.uniform(0.0, std::f64::consts::PI),
            intensity: rng.uniform(0.55, 0.85),
        }];
        let count = 3 + rng.below(5);
        for _ in 0..count {
            let sign = if rng.next_f64() < 0.6 { 1.0 } else { -1.0 };
            ellipses.push(Ellipse {
                cx: rng.uniform(-0.45, 0.45),
                cy: rng.uniform(-0.45, 0.45),
                a: rng.uniform(0.06, 0.3),
                b: rng.uniform(0.06, 0.3),
                theta: rng.uniform(0.0, std::f64::consts::PI),
                intensity: sign * rng.uniform(0.1, 0.35),
            });
        }
        Self::new(size, ellipses, seed)
    }
}

/// Rasterises the spec: each pixel sums the intensities of the ellipses
/// containing its centre, then is clamped to `[0, 1]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Image {
    let n = spec.size;
    let coord = |i: usize| (2 * i + 1) as f64 / n as f64 - 1.0;
    Image::from_fn(n, n, |r, c| {
        let (u, v) = (coord(c), coord(r));
        let s: f64 = spec
            .ellipses
            .iter()
            .filter(|e| e.contains(u, v))
            .map(|e| e.intensity)
            .sum();
        s.clamp(0.0, 1.0)
    })
}
