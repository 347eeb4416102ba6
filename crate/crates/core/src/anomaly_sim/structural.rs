//! Structural noise: a photometrically and geometrically jittered copy of
//! the input, cut into a grid of tiles that are then shuffled.

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Image;
use crate::error::{Error, Result};

/// Ranges for the random jitter applied before tile shuffling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub enabled: bool,
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Saturation factor drawn from `1 ± saturation`.
    pub saturation: f64,
    /// Hue shift drawn from `± hue` of a full turn.
    pub hue: f64,
    /// Probability of each of the horizontal and vertical flips.
    pub mirror_prob: f64,
    /// Rotate by a random multiple of 90° (square images only; otherwise
    /// 0° or 180°).
    pub rotate: bool,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            enabled: true,
            brightness: 0.3,
            saturation: 0.3,
            hue: 0.1,
            mirror_prob: 0.5,
            rotate: true,
        }
    }
}

/// One concrete draw of [`JitterConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: usize,
    pub brightness: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        flip_h: false,
        flip_v: false,
        quarter_turns: 0,
        brightness: 1.0,
        saturation: 1.0,
        hue_shift: 0.0,
    };

    pub fn draw<R: Rng>(cfg: &JitterConfig, square: bool, rng: &mut R) -> Jitter {
        if !cfg.enabled {
            return Jitter::IDENTITY;
        }
        let spread = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        Jitter {
            flip_h: rng.gen_bool(cfg.mirror_prob),
            flip_v: rng.gen_bool(cfg.mirror_prob),
            quarter_turns: match (cfg.rotate, square) {
                (false, _) => 0,
                (true, true) => rng.gen_range(0..4),
                (true, false) => 2 * rng.gen_range(0..2),
            },
            brightness: 1.0 + spread(rng, cfg.brightness),
            saturation: 1.0 + spread(rng, cfg.saturation),
            hue_shift: spread(rng, cfg.hue),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut a = img.array().clone();
        if self.flip_h {
            a.invert_axis(Axis(2));
        }
        if self.flip_v {
            a.invert_axis(Axis(1));
        }
        for _ in 0..self.quarter_turns {
            // rotate 90° counter-clockwise: transpose then flip rows
            a.swap_axes(1, 2);
            a.invert_axis(Axis(1));
        }
        let mut a = a.as_standard_layout().into_owned();
        if *self != Jitter::IDENTITY {
            let (_, h, w) = a.dim();
            for y in 0..h {
                for x in 0..w {
                    let rgb = [a[[0, y, x]], a[[1, y, x]], a[[2, y, x]]];
                    let out = self.color(rgb);
                    for c in 0..3 {
                        a[[c, y, x]] = out[c];
                    }
                }
            }
        }
        Image::from_array(a).expect("three channels")
    }

    fn color(&self, rgb: [f64; 3]) -> [f64; 3] {
        let b = rgb.map(|v| (v * self.brightness).clamp(0.0, 1.0));
        let gray = 0.299 * b[0] + 0.587 * b[1] + 0.114 * b[2];
        let s = b.map(|v| (gray + self.saturation * (v - gray)).clamp(0.0, 1.0));
        if self.hue_shift == 0.0 {
            return s;
        }
        let (h, sat, val) = rgb_to_hsv(s);
        hsv_to_rgb((h + self.hue_shift).rem_euclid(1.0), sat, val)
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i64;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Reassemble `img` from a `rows × cols` grid so that output tile `t` is
/// input tile `perm[t]` (tiles numbered row-major).
pub fn shuffle_tiles(img: &Image, grid: (usize, usize), perm: &[usize]) -> Result<Image> {
    let (rows, cols) = grid;
    let (h, w) = (img.height(), img.width());
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::InvalidConfig(format!(
            "grid {rows}x{cols} does not divide a {h}x{w} image"
        )));
    }
    if perm.len() != rows * cols {
        return Err(Error::InvalidConfig(format!(
            "permutation of length {} for {} tiles",
            perm.len(),
            rows * cols
        )));
    }
    let (th, tw) = (h / rows, w / cols);
    let src = img.array();
    let mut out = Array3::zeros(src.raw_dim());
    for (t, &from) in perm.iter().enumerate() {
        let (oy, ox) = ((t / cols) * th, (t % cols) * tw);
        let (iy, ix) = ((from / cols) * th, (from % cols) * tw);
        out.slice_mut(s![.., oy..oy + th, ox..ox + tw])
            .assign(&src.slice(s![.., iy..iy + th, ix..ix + tw]));
    }
    Image::from_array(out)
}

/// Jitter the image, then shuffle a `rows × cols` tile grid uniformly at
/// random.
pub fn make_structural_noise<R: Rng>(img: &Image, grid: (usize, usize), jitter: &JitterConfig, rng: &mut R) -> Result<Image> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || img.height() % rows != 0 || img.width() % cols != 0 {
        return Err(Error::InvalidConfig(format!(
            "grid {rows}x{cols} does not divide a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let j = Jitter::draw(jitter, img.height() == img.width(), rng);
    let jittered = j.apply(img);
    let mut perm: Vec<usize> = (0..rows * cols).collect();
    perm.shuffle(rng);
    shuffle_tiles(&jittered, grid, &perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| ((c * 7919 + y * 131 + x) % 251) as f64 / 250.0)
    }

    fn sorted_values(img: &Image) -> Vec<u64> {
        let mut v: Vec<u64> = img.array().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn identity_permutation_without_jitter_is_identity() {
        let img = gradient_image(256, 256);
        let perm: Vec<usize> = (0..32).collect();
        assert_eq!(shuffle_tiles(&img, (4, 8), &perm).unwrap(), img);
        assert_eq!(Jitter::IDENTITY.apply(&img), img);
    }

    #[test]
    fn shuffle_without_jitter_preserves_pixel_multiset() {
        let img = gradient_image(64, 64);
        let off = JitterConfig {
            enabled: false,
            ..JitterConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let out = make_structural_noise(&img, (4, 8), &off, &mut rng).unwrap();
            assert_eq!(sorted_values(&out), sorted_values(&img));
        }
    }

    #[test]
    fn tiles_are_64_by_32_on_a_256_image() {
        let img = gradient_image(256, 256);
        // swap tiles 0 and 1 only: rows split height into 4, columns width into 8
        let mut perm: Vec<usize> = (0..32).collect();
        perm.swap(0, 1);
        let out = shuffle_tiles(&img, (4, 8), &perm).unwrap();
        let (a, b) = (img.array(), out.array());
        for y in 0..64 {
            for x in 0..32 {
                assert_eq!(b[[0, y, x]], a[[0, y, x + 32]]);
                assert_eq!(b[[0, y, x + 32]], a[[0, y, x]]);
            }
        }
        // untouched below the first tile row
        assert_eq!(b[[0, 64, 0]], a[[0, 64, 0]]);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let img = gradient_image(30, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_structural_noise(&img, (4, 8), &JitterConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn hsv_roundtrip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jitter_stays_in_unit_range() {
        let img = gradient_image(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let j = Jitter::draw(&JitterConfig::default(), true, &mut rng);
            let out = j.apply(&img);
            assert!(out.min() >= 0.0 && out.max() <= 1.0);
        }
    }
}
