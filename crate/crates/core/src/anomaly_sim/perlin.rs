use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::{BinaryMask, MaskRole};
use crate::error::{Error, Result};

/// A 2-D gradient-noise field.
#[derive(Clone, Debug, PartialEq)]
pub struct PerlinField {
    pub values: Array2<f64>,
    /// Lattice cells along (rows, columns).
    pub freq: (usize, usize),
    pub seed: u64,
}

impl PerlinField {
    /// Pixel coordinates that coincide with lattice points.
    pub fn lattice_pixels(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.values.dim();
        let (fy, fx) = self.freq;
        let mut out = Vec::new();
        for gy in 0..=fy {
            for gx in 0..=fx {
                if (gy * h) % fy == 0 && (gx * w) % fx == 0 {
                    let (y, x) = (gy * h / fy, gx * w / fx);
                    if y < h && x < w {
                        out.push((y, x));
                    }
                }
            }
        }
        out
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Classic Perlin noise: random unit gradients on a `(fy+1)×(fx+1)`
/// lattice, quintic fade interpolation of the corner dot products, scaled
/// by `√2` so the field spans `[-1, 1]`.
///
/// The field is exactly zero on lattice points.
pub fn gen_perlin(h: usize, w: usize, freq: (usize, usize), seed: u64) -> Result<PerlinField> {
    let (fy, fx) = freq;
    if fy == 0 || fx == 0 || h < fy || w < fx {
        return Err(Error::InvalidConfig(format!(
            "perlin frequency {freq:?} must be >= 1 and fit a {h}x{w} field"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gradients = Array2::from_shape_fn((fy + 1, fx + 1), |_| {
        let a = rng.gen_range(0.0..2.0 * PI);
        (a.cos(), a.sin())
    });
    let values = Array2::from_shape_fn((h, w), |(y, x)| {
        let v = y as f64 * fy as f64 / h as f64;
        let u = x as f64 * fx as f64 / w as f64;
        let (j0, i0) = ((v.floor() as usize).min(fy - 1), (u.floor() as usize).min(fx - 1));
        let (tv, tu) = (v - j0 as f64, u - i0 as f64);
        let dot = |j: usize, i: usize, dv: f64, du: f64| {
            let (gx, gy) = gradients[[j, i]];
            gx * du + gy * dv
        };
        let n00 = dot(j0, i0, tv, tu);
        let n01 = dot(j0, i0 + 1, tv, tu - 1.0);
        let n10 = dot(j0 + 1, i0, tv - 1.0, tu);
        let n11 = dot(j0 + 1, i0 + 1, tv - 1.0, tu - 1.0);
        let (su, sv) = (fade(tu), fade(tv));
        let top = n00 + su * (n01 - n00);
        let bot = n10 + su * (n11 - n10);
        std::f64::consts::SQRT_2 * (top + sv * (bot - top))
    });
    Ok(PerlinField { values, freq, seed })
}

/// `1` where the field exceeds `threshold`, else `0`.
pub fn binarize_perlin(p: &PerlinField, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(p.values.dim(), MaskRole::Perlin, |y, x| p.values[[y, x]] > threshold)
}
