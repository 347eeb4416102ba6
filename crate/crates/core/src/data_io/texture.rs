//! Noise images for textural anomaly simulation.
//!
//! A [`TextureSource`] either samples random crops from a directory of
//! texture photographs (the usual choice is the Describable Textures
//! Dataset) or synthesises textures procedurally. The procedural mode exists
//! so everything runs without external data; its textures are much more
//! regular than real photographs and are not a substitute for them when
//! reproducing published numbers.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::list_images;
use super::image_io::{load_crop, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TextureMode {
    Directory { path: PathBuf },
    Procedural,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureSource {
    pub mode: TextureMode,
    pub seed: u64,
    files: Vec<PathBuf>,
}

impl TextureSource {
    pub fn procedural(seed: u64) -> Self {
        TextureSource {
            mode: TextureMode::Procedural,
            seed,
            files: Vec::new(),
        }
    }

    /// Index a directory (recursively) of texture images.
    pub fn directory(path: &Path, seed: u64) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::MissingDirectory(path.to_owned()));
        }
        let mut files = Vec::new();
        collect_images(path, &mut files)?;
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyTextureDirectory(path.to_owned()));
        }
        Ok(TextureSource {
            mode: TextureMode::Directory {
                path: path.to_owned(),
            },
            seed,
            files,
        })
    }

    pub fn from_mode(mode: &TextureMode, seed: u64) -> Result<Self> {
        match mode {
            TextureMode::Procedural => Ok(Self::procedural(seed)),
            TextureMode::Directory { path } => Self::directory(path, seed),
        }
    }

    /// Independent generator for sample number `index` of this source.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Draw a `size × size` texture.
    pub fn sample<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Image> {
        match &self.mode {
            TextureMode::Procedural => Ok(procedural_texture(size, rng)),
            TextureMode::Directory { .. } => {
                let path = &self.files[rng.gen_range(0..self.files.len())];
                let frac = rng.gen_range(0.5..=1.0);
                let (u, v): (f64, f64) = (rng.gen(), rng.gen());
                load_crop(path, size, |w, h| {
                    let side = ((w.min(h) as f64 * frac) as u32).max(1);
                    let y = ((h - side) as f64 * u) as u32;
                    let x = ((w - side) as f64 * v) as u32;
                    (y, x, side)
                })
            }
        }
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    out.extend(list_images(dir)?);
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_images(&p, out)?;
        }
    }
    Ok(())
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn grating<R: Rng>(size: usize, rng: &mut R) -> Array2<f64> {
    let freq = rng.gen_range(1.0..12.0) * 2.0 * PI / size as f64;
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    Array2::from_shape_fn((size, size), |(y, x)| {
        0.5 + 0.5 * ((x as f64 * c + y as f64 * s) * freq + phase).sin()
    })
}

fn checker<R: Rng>(size: usize, rng: &mut R) -> Array2<f64> {
    let cell = rng.gen_range(2.0..(size as f64 / 2.0).max(3.0));
    let theta = rng.gen_range(0.0..PI / 2.0);
    let (c, s) = (theta.cos(), theta.sin());
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (x, y) = (x as f64, y as f64);
        let u = ((x * c - y * s) / cell).floor() as i64;
        let v = ((x * s + y * c) / cell).floor() as i64;
        ((u + v).rem_euclid(2)) as f64
    })
}

/// Lattice value noise with bilinear smoothing, in `[0, 1]`.
pub(crate) fn smooth_noise<R: Rng>(size: usize, cells: usize, rng: &mut R) -> Array2<f64> {
    let cells = cells.max(1);
    let lattice = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.gen::<f64>());
    let step = cells as f64 / size as f64;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f64 * step;
        let fx = x as f64 * step;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let top = lattice[[y0, x0]] * (1.0 - tx) + lattice[[y0, x0 + 1]] * tx;
        let bot = lattice[[y0 + 1, x0]] * (1.0 - tx) + lattice[[y0 + 1, x0 + 1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// A random blend of sinusoidal gratings, checker fields and smoothed noise,
/// coloured between two random colours.
pub fn procedural_texture<R: Rng>(size: usize, rng: &mut R) -> Image {
    let layers = rng.gen_range(1..=3);
    let mut field = Array2::<f64>::zeros((size, size));
    let mut total = 0.0;
    for _ in 0..layers {
        let weight = rng.gen_range(0.2..1.0);
        let layer = match rng.gen_range(0..3) {
            0 => grating(size, rng),
            1 => checker(size, rng),
            _ => {
                let cells = rng.gen_range(2..=(size / 4).max(2));
                smooth_noise(size, cells, rng)
            }
        };
        field = field + layer * weight;
        total += weight;
    }
    field /= total;
    let (a, b) = (random_color(rng), random_color(rng));
    let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let t = field[[y, x]];
        (a[c] * (1.0 - t) + b[c] * t).clamp(0.0, 1.0)
    });
    Image::from_array(pixels).expect("three channels")
}

/// A fixed procedural texture "product": every image drawn from the same
/// family shares pattern and colours and differs only by a small shift,
/// brightness change and sensor-like noise. Used to fabricate normal
/// training and test data.
#[derive(Clone, Debug)]
pub struct TextureFamily {
    size: usize,
    base: Image,
}

impl TextureFamily {
    pub fn new(size: usize, family_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(family_seed);
        // render oversized so shifted crops stay inside the base pattern
        let base = procedural_texture(size + size / 8, &mut rng);
        TextureFamily { size, base }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Image {
        let margin = self.base.height() - self.size;
        let dy = rng.gen_range(0..=margin);
        let dx = rng.gen_range(0..=margin);
        let gain = rng.gen_range(0.97..1.03);
        let base = self.base.array();
        Image::from_fn(self.size, self.size, |c, y, x| {
            let noise = rng_hash(y, x, c, dy * 131 + dx) * 0.02 - 0.01;
            (base[[c, y + dy, x + dx]] * gain + noise).clamp(0.0, 1.0)
        })
    }
}

// Cheap deterministic per-pixel jitter in [0, 1).
fn rng_hash(y: usize, x: usize, c: usize, salt: usize) -> f64 {
    let mut h = (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (x as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (c as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
        ^ (salt as u64).wrapping_mul(0x27D4_EB2F_1656_67C5);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ::image::{Rgb, RgbImage};

    #[test]
    fn procedural_is_deterministic_per_seed() {
        let src = TextureSource::procedural(42);
        let a = src.sample(32, &mut src.stream(0)).unwrap();
        let b = src.sample(32, &mut src.stream(0)).unwrap();
        assert_eq!(a, b);
        let c = src.sample(32, &mut src.stream(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn procedural_stays_in_unit_range() {
        let src = TextureSource::procedural(7);
        for i in 0..20 {
            let t = src.sample(48, &mut src.stream(i)).unwrap();
            assert_eq!(t.array().shape(), &[3, 48, 48]);
            assert!(t.min() >= 0.0 && t.max() <= 1.0);
        }
    }

    #[test]
    fn directory_with_one_image_crops_it() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::from_pixel(40, 30, Rgb([255, 0, 0]))
            .save(dir.path().join("only.png"))
            .unwrap();
        let src = TextureSource::directory(dir.path(), 1).unwrap();
        let t = src.sample(16, &mut src.stream(0)).unwrap();
        assert_eq!(t.array().shape(), &[3, 16, 16]);
        assert!((t.array()[[0, 5, 5]] - 1.0).abs() < 1e-6);
        assert!(t.array()[[1, 5, 5]].abs() < 1e-6);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            TextureSource::directory(dir.path(), 1),
            Err(Error::EmptyTextureDirectory(_))
        ));
    }

    #[test]
    fn family_members_are_similar_but_distinct() {
        let fam = TextureFamily::new(32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = fam.sample(&mut rng);
        let b = fam.sample(&mut rng);
        assert_ne!(a, b);
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
    }
}
