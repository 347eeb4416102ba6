//! Simulated anomalies for self-supervised training.
//!
//! A simulated defect is made in three steps:
//!
//! 1. a mask `M` from thresholded Perlin noise, optionally intersected with
//!    the object foreground of the input;
//! 2. a noisy foreground `I′ₙ = δ(M ⊙ Iₙ) + (1 − δ)(M ⊙ I)`, where the noise
//!    image `Iₙ` is either a texture (textural anomaly) or a shuffled copy
//!    of the input (structural anomaly);
//! 3. the composite `I_A = M̄ ⊙ I + I′ₙ`.
//!
//! Outside the mask the composite equals the input bit for bit.

mod mask;
mod perlin;
mod structural;

use ndarray::{Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mask::{closing, combine_masks, dilate, erode, foreground_mask, iou, opening, otsu_threshold, BinaryMask, MaskRole};
pub use perlin::{binarize_perlin, gen_perlin, PerlinField};
pub use structural::{make_structural_noise, shuffle_tiles, Jitter, JitterConfig};

use crate::data_io::{Image, TextureSource};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Threshold applied to the `[-1, 1]` Perlin field.
    pub perlin_threshold: f64,
    /// Lattice frequency per axis is `2^k`, `k` uniform in this inclusive
    /// range (capped so a cell spans at least one pixel).
    pub perlin_octaves: (u32, u32),
    /// Transparency `δ` is uniform in this inclusive range.
    pub delta_range: (f64, f64),
    /// Restrict anomalies to the object foreground.
    pub foreground: bool,
    /// Structural noise grid as `(rows, cols)`.
    pub grid: (usize, usize),
    /// Probability of structural (vs. textural) noise.
    pub structural_prob: f64,
    /// Side of the square structuring element for foreground cleanup.
    pub morph_kernel: usize,
    pub jitter: JitterConfig,
    /// Perlin redraws before giving up on an empty mask.
    pub max_retries: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            perlin_threshold: 0.5,
            perlin_octaves: (1, 5),
            delta_range: (0.15, 1.0),
            foreground: false,
            grid: (4, 8),
            structural_prob: 0.5,
            morph_kernel: 5,
            jitter: JitterConfig::default(),
            max_retries: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.delta_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "delta range {:?} must be an interval inside [0, 1]",
                self.delta_range
            )));
        }
        if !(0.0..=1.0).contains(&self.structural_prob) {
            return Err(Error::InvalidConfig("structural_prob must be in [0, 1]".into()));
        }
        if self.perlin_octaves.0 > self.perlin_octaves.1 {
            return Err(Error::InvalidConfig("perlin_octaves must be (min, max)".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.morph_kernel == 0 {
            return Err(Error::InvalidConfig("grid and morph_kernel must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter.mirror_prob) {
            return Err(Error::InvalidConfig("jitter.mirror_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Check the grid against concrete image dimensions.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if height % self.grid.0 != 0 || width % self.grid.1 != 0 {
            return Err(Error::InvalidConfig(format!(
                "grid {:?} does not divide {height}x{width}",
                self.grid
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Textural,
    Structural,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedSample {
    pub image: Image,
    pub mask: BinaryMask,
    pub delta: f64,
    pub kind: NoiseKind,
    /// The full noise image `Iₙ` the foreground was cut from.
    pub noise: Image,
}

fn check_same(a: &Image, b: &Image, m: &BinaryMask) -> Result<()> {
    if a.array().dim() != b.array().dim() || (a.height(), a.width()) != m.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, noise {:?} and mask {:?} must agree",
            a.array().dim(),
            b.array().dim(),
            m.dim()
        )));
    }
    Ok(())
}

/// `δ(M ⊙ Iₙ) + (1 − δ)(M ⊙ I)`; zero wherever `M` is zero.
pub fn blend_noise_foreground(img: &Image, noise: &Image, m: &BinaryMask, delta: f64) -> Result<Image> {
    check_same(img, noise, m)?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidConfig(format!("delta {delta} outside [0, 1]")));
    }
    let mut out = Array3::zeros(img.array().raw_dim());
    for c in 0..3 {
        Zip::from(out.index_axis_mut(ndarray::Axis(0), c))
            .and(img.array().index_axis(ndarray::Axis(0), c))
            .and(noise.array().index_axis(ndarray::Axis(0), c))
            .and(m.values())
            .for_each(|o, &i, &n, &mv| {
                *o = delta * (mv * n) + (1.0 - delta) * (mv * i);
            });
    }
    Image::from_array(out)
}

/// `I_A = M̄ ⊙ I + I′ₙ`.
pub fn compose_anomaly(img: &Image, noisy_fg: &Image, m: &BinaryMask) -> Result<Image> {
    check_same(img, noisy_fg, m)?;
    let inv = m.inverted();
    let mut out = Array3::zeros(img.array().raw_dim());
    for c in 0..3 {
        Zip::from(out.index_axis_mut(ndarray::Axis(0), c))
            .and(img.array().index_axis(ndarray::Axis(0), c))
            .and(noisy_fg.array().index_axis(ndarray::Axis(0), c))
            .and(inv.values())
            .for_each(|o, &i, &f, &mb| {
                *o = mb * i + f;
            });
    }
    Image::from_array(out)
}

fn draw_frequency<R: Rng>(cfg: &SimConfig, extent: usize, rng: &mut R) -> usize {
    let k = rng.gen_range(cfg.perlin_octaves.0..=cfg.perlin_octaves.1);
    (1usize << k).min(extent).max(1)
}

/// Draw a textural noise image of the given size.
fn textural_noise<R: Rng>(tex: &TextureSource, h: usize, w: usize, rng: &mut R) -> Result<Image> {
    let side = h.max(w);
    let t = tex.sample(side, rng)?;
    if side == h && side == w {
        return Ok(t);
    }
    Image::from_array(t.array().slice(ndarray::s![.., ..h, ..w]).to_owned())
}

/// Produce one simulated anomalous sample from a normal image.
pub fn simulate<R: Rng>(img: &Image, cfg: &SimConfig, tex: &TextureSource, rng: &mut R) -> Result<SimulatedSample> {
    let (h, w) = (img.height(), img.width());
    cfg.validate_for(h, w)?;
    let kind = if rng.gen_bool(cfg.structural_prob) {
        NoiseKind::Structural
    } else {
        NoiseKind::Textural
    };
    let fg = cfg.foreground.then(|| foreground_mask(img, cfg.morph_kernel));

    let mut mask = None;
    for _ in 0..cfg.max_retries.max(1) {
        let freq = (draw_frequency(cfg, h, rng), draw_frequency(cfg, w, rng));
        let field = gen_perlin(h, w, freq, rng.gen())?;
        let mp = binarize_perlin(&field, cfg.perlin_threshold);
        let m = combine_masks(&mp, fg.as_ref())?;
        if m.count() > 0 {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or(Error::DegenerateMask(cfg.max_retries.max(1)))?;

    let noise = match kind {
        NoiseKind::Textural => textural_noise(tex, h, w, rng)?,
        NoiseKind::Structural => make_structural_noise(img, cfg.grid, &cfg.jitter, rng)?,
    };
    let (lo, hi) = cfg.delta_range;
    let delta = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let fg_noise = blend_noise_foreground(img, &noise, &mask, delta)?;
    let image = compose_anomaly(img, &fg_noise, &mask)?;
    Ok(SimulatedSample {
        image,
        mask,
        delta,
        kind,
        noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pixel(v: f64) -> Image {
        Image::filled(1, 1, [v, v, v])
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let on = BinaryMask::ones((1, 1), MaskRole::Combined);
        let (i, n) = (pixel(0.2), pixel(0.8));
        assert_eq!(blend_noise_foreground(&i, &n, &on, 1.0).unwrap(), n);
        assert_eq!(blend_noise_foreground(&i, &n, &on, 0.0).unwrap(), i);
        let mid = blend_noise_foreground(&i, &n, &on, 0.5).unwrap();
        assert!((mid.array()[[0, 0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn blend_is_zero_outside_mask() {
        let off = BinaryMask::zeros((1, 1), MaskRole::Combined);
        let out = blend_noise_foreground(&pixel(0.3), &pixel(0.9), &off, 0.7).unwrap();
        assert_eq!(out.array()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn compose_identities() {
        let i = Image::from_fn(4, 4, |c, y, x| (c + y + x) as f64 / 12.0);
        let n = Image::from_fn(4, 4, |c, y, x| 1.0 - (c * y + x) as f64 / 20.0);
        let zeros = BinaryMask::zeros((4, 4), MaskRole::Combined);
        let fg = blend_noise_foreground(&i, &n, &zeros, 0.6).unwrap();
        assert_eq!(compose_anomaly(&i, &fg, &zeros).unwrap(), i);
        let ones = BinaryMask::ones((4, 4), MaskRole::Combined);
        let fg = blend_noise_foreground(&i, &n, &ones, 1.0).unwrap();
        assert_eq!(compose_anomaly(&i, &fg, &ones).unwrap(), n);
    }

    #[test]
    fn blend_and_compose_match_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let i = Image::from_fn(8, 8, |_, _, _| rng.gen());
            let n = Image::from_fn(8, 8, |_, _, _| rng.gen());
            let m = BinaryMask::from_fn((8, 8), MaskRole::Combined, |_, _| rng.gen_bool(0.4));
            let d: f64 = rng.gen();
            let fg = blend_noise_foreground(&i, &n, &m, d).unwrap();
            let out = compose_anomaly(&i, &fg, &m).unwrap();
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let (iv, nv, mv) = (i.array()[[c, y, x]], n.array()[[c, y, x]], m.values()[[y, x]]);
                        let want_fg = d * (mv * nv) + (1.0 - d) * (mv * iv);
                        assert_eq!(fg.array()[[c, y, x]], want_fg);
                        assert_eq!(out.array()[[c, y, x]], (1.0 - mv) * iv + want_fg);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = BinaryMask::ones((2, 2), MaskRole::Combined);
        assert!(blend_noise_foreground(&pixel(0.1), &pixel(0.2), &m, 0.5).is_err());
        assert!(compose_anomaly(&pixel(0.1), &pixel(0.2), &m).is_err());
    }

    #[test]
    fn simulate_is_deterministic_and_in_range() {
        let img = Image::from_fn(64, 64, |c, y, x| ((c * 17 + y * 3 + x * 5) % 64) as f64 / 63.0);
        let tex = TextureSource::procedural(1);
        let cfg = SimConfig::default();
        let a = simulate(&img, &cfg, &tex, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = simulate(&img, &cfg, &tex, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.delta >= 0.15 && a.delta <= 1.0);
        assert!(a.mask.count() > 0);
        assert_eq!(a.mask.role(), MaskRole::Combined);
    }

    #[test]
    fn impossible_threshold_gives_degenerate_mask_error() {
        let img = Image::filled(32, 32, [0.5; 3]);
        let cfg = SimConfig {
            perlin_threshold: 1.0,
            max_retries: 3,
            ..SimConfig::default()
        };
        let err = simulate(&img, &cfg, &TextureSource::procedural(0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask(3)));
        assert!(err.to_string().contains("degenerate mask"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_delta = SimConfig {
            delta_range: (0.5, 1.2),
            ..SimConfig::default()
        };
        assert!(bad_delta.validate().is_err());
        let bad_prob = SimConfig {
            structural_prob: -0.1,
            ..SimConfig::default()
        };
        assert!(bad_prob.validate().is_err());
        assert!(SimConfig::default().validate_for(30, 64).is_err());
    }

    #[test]
    fn foreground_restricts_mask_to_object() {
        // bright square object on dark background
        let img = Image::from_fn(64, 64, |_, y, x| if (16..48).contains(&y) && (16..48).contains(&x) { 0.9 } else { 0.1 });
        let cfg = SimConfig {
            foreground: true,
            morph_kernel: 3,
            ..SimConfig::default()
        };
        let tex = TextureSource::procedural(2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let s = simulate(&img, &cfg, &tex, &mut rng).unwrap();
            for ((y, x), &v) in s.mask.values().indexed_iter() {
                if v == 1.0 {
                    assert!((16..48).contains(&y) && (16..48).contains(&x));
                }
            }
        }
    }
}
