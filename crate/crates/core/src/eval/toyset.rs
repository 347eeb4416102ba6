//! Toy anomalies: regular filled shapes painted onto normal images.
//!
//! Shapes are rasterised by testing pixel centres against the shape
//! outline, with no anti-aliasing, so the painted pixels and the mask
//! coincide exactly. Work happens on 8-bit values so PNG output is
//! lossless.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{save_gray_png, Image, ImageSource, TextureFamily};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Triangle,
    LightningBolt,
    Star,
    Heart,
    Circle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::LightningBolt,
        ShapeKind::Star,
        ShapeKind::Heart,
        ShapeKind::Circle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::LightningBolt => "lightning_bolt",
            ShapeKind::Star => "star",
            ShapeKind::Heart => "heart",
            ShapeKind::Circle => "circle",
        }
    }

    /// Whether unit-box point `(u, v)` (both in `[-1, 1]`, `v` pointing
    /// down) lies inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Triangle => in_polygon(&[(0.0, -1.0), (1.0, 1.0), (-1.0, 1.0)], u, v),
            ShapeKind::LightningBolt => in_polygon(
                &[(-0.2, -1.0), (0.6, -1.0), (0.15, -0.15), (0.55, -0.15), (-0.45, 1.0), (-0.05, 0.1), (-0.5, 0.1)],
                u,
                v,
            ),
            ShapeKind::Star => in_polygon(&star_outline(), u, v),
            ShapeKind::Heart => in_polygon(&heart_outline(), u, v),
        }
    }
}

fn star_outline() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { 0.4 };
            let a = -PI / 2.0 + i as f64 * PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn heart_outline() -> Vec<(f64, f64)> {
    (0..96)
        .map(|i| {
            let t = i as f64 * 2.0 * PI / 96.0;
            let x = 16.0 * t.sin().powi(3);
            let y = 13.0 * t.cos() - 5.0 * (2.0 * t).cos() - 2.0 * (3.0 * t).cos() - (4.0 * t).cos();
            // the classic curve spans x in [-16, 16], y in [-17, 12]
            (x / 16.0, -(y + 2.5) / 14.5)
        })
        .collect()
}

/// Even-odd rule.
fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub count: usize,
    pub seed: u64,
    /// Shape size as a fraction of the image side.
    pub size_range: (f64, f64),
    /// Width-to-height ratio range (sampled log-uniformly).
    pub aspect_range: (f64, f64),
    pub kinds: Vec<ShapeKind>,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            count: 60,
            seed: 0,
            size_range: (0.1, 0.3),
            aspect_range: (0.5, 2.0),
            kinds: ShapeKind::ALL.to_vec(),
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.size_range;
        let (c, d) = self.aspect_range;
        if self.kinds.is_empty() || !(0.0 < a && a <= b && b <= 1.0) || !(0.0 < c && c <= d) {
            return Err(Error::InvalidConfig("toy spec ranges must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyRecord {
    pub index: usize,
    pub source: usize,
    pub kind: ShapeKind,
    #[serde(serialize_with = "hex_color")]
    pub color: [u8; 3],
    pub center_y: f64,
    pub center_x: f64,
    pub width: f64,
    pub height: f64,
    pub angle: f64,
    pub mask_pixels: usize,
}

fn hex_color<S: serde::Serializer>(c: &[u8; 3], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]))
}

fn quantize(img: &Image) -> Vec<[u8; 3]> {
    let rgb = img.to_rgb8();
    rgb.pixels().map(|p| p.0).collect()
}

/// Paint one random shape of `kind` onto (the 8-bit quantisation of)
/// `source`. Returns the painted image, its exact mask and the draw.
pub fn paint_shape<R: Rng>(source: &Image, kind: ShapeKind, spec: &ToySpec, rng: &mut R) -> Result<(Image, Array2<f64>, ToyRecord)> {
    spec.validate()?;
    let (h, w) = (source.height(), source.width());
    let side = h.min(w) as f64;
    let base = quantize(source);
    for _ in 0..100 {
        let size = side * rng.gen_range(spec.size_range.0..=spec.size_range.1);
        let aspect = rng.gen_range(spec.aspect_range.0.ln()..=spec.aspect_range.1.ln()).exp();
        let (sw, sh) = (size * aspect.sqrt(), size / aspect.sqrt());
        let angle = rng.gen_range(0.0..2.0 * PI);
        let r = 0.5 * sw.hypot(sh).min(side);
        let pick = |rng: &mut R, extent: usize| {
            let e = extent as f64;
            if 2.0 * r >= e {
                e / 2.0
            } else {
                rng.gen_range(r..=e - r)
            }
        };
        let cy = pick(rng, h);
        let cx = pick(rng, w);
        let (cos, sin) = (angle.cos(), angle.sin());
        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (cos * dx + sin * dy) / (sw / 2.0);
            let v = (-sin * dx + cos * dy) / (sh / 2.0);
            if kind.contains(u, v) {
                1.0
            } else {
                0.0
            }
        });
        let support: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m == 1.0).map(|(i, _)| i).collect();
        if support.is_empty() {
            continue;
        }
        // a colour equal to some covered source pixel would leave that
        // pixel unchanged; redraw until none collide
        let mut color = [0u8; 3];
        for _ in 0..256 {
            color = [rng.gen(), rng.gen(), rng.gen()];
            if support.iter().all(|&i| base[i] != color) {
                break;
            }
        }
        let mut out = base.clone();
        for &i in &support {
            out[i] = if base[i] == color { color.map(|c| c ^ 0x80) } else { color };
        }
        let img = Image::from_fn(h, w, |c, y, x| out[y * w + x][c] as f64 / 255.0);
        let rec = ToyRecord {
            index: 0,
            source: 0,
            kind,
            color,
            center_y: cy,
            center_x: cx,
            width: sw,
            height: sh,
            angle,
            mask_pixels: support.len(),
        };
        return Ok((img, mask, rec));
    }
    Err(Error::DegenerateMask(100))
}

/// In-memory toy anomalies: `spec.count` images, sources cycled, kinds
/// drawn uniformly from `spec.kinds`.
pub fn toy_samples<S: ImageSource + ?Sized>(sources: &S, spec: &ToySpec) -> Result<Vec<(Image, Array2<f64>, ToyRecord)>> {
    if sources.is_empty() {
        return Err(Error::NotEnoughItems { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|i| {
            let src = i % sources.len();
            let kind = *spec.kinds.choose(&mut rng).expect("validated non-empty");
            let (img, mask, mut rec) = paint_shape(&sources.load(src)?, kind, spec, &mut rng)?;
            rec.index = i;
            rec.source = src;
            Ok((img, mask, rec))
        })
        .collect()
}

/// Write toy anomalies in the test layout under `root/category`:
/// `test/<shape>/NNN.png` and `ground_truth/<shape>/NNN_mask.png`, plus
/// `toyset_log.csv` listing every draw.
pub fn gen_toyset<S: ImageSource + ?Sized>(sources: &S, spec: &ToySpec, root: &Path, category: &str) -> Result<Vec<ToyRecord>> {
    let cat = root.join(category);
    let samples = toy_samples(sources, spec)?;
    let mut log = csv::Writer::from_path(cat_log_path(&cat)?)?;
    let mut records = Vec::with_capacity(samples.len());
    for (img, mask, rec) in samples {
        let test_dir = cat.join("test").join(rec.kind.name());
        let gt_dir = cat.join("ground_truth").join(rec.kind.name());
        for d in [&test_dir, &gt_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        img.save_png(&test_dir.join(format!("{:03}.png", rec.index)))?;
        save_gray_png(&mask, &gt_dir.join(format!("{:03}_mask.png", rec.index)))?;
        log.serialize(&rec)?;
        records.push(rec);
    }
    log.flush().map_err(|e| Error::io(&cat, e))?;
    Ok(records)
}

fn cat_log_path(cat: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(cat).map_err(|e| Error::io(cat, e))?;
    Ok(cat.join("toyset_log.csv"))
}

/// Save images as `dir/NNN.png`.
pub fn write_images(dir: &Path, images: &[Image]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("{i:03}.png"));
            img.save_png(&p)?;
            Ok(p)
        })
        .collect()
}

/// A synthetic category: normals from one procedural texture family, toy
/// anomalies painted on further held-out normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub size: usize,
    pub family_seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub toy: ToySpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            family_seed: 0,
            n_train: 200,
            n_test_normal: 50,
            toy: ToySpec {
                count: 50,
                ..ToySpec::default()
            },
        }
    }
}

/// Write `root/category/{train/good, test/good, test/<shape>,
/// ground_truth/<shape>}`. Every image is a distinct draw from the family.
pub fn synth_category(root: &Path, category: &str, spec: &SynthSpec) -> Result<PathBuf> {
    let fam = TextureFamily::new(spec.size, spec.family_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.family_seed ^ 0x5EED);
    let mut draw = |n: usize| (0..n).map(|_| fam.sample(&mut rng)).collect::<Vec<_>>();
    let train = draw(spec.n_train);
    let test_normal = draw(spec.n_test_normal);
    let anomaly_base = draw(spec.toy.count.max(1));
    let cat = root.join(category);
    write_images(&cat.join("train").join("good"), &train)?;
    write_images(&cat.join("test").join("good"), &test_normal)?;
    gen_toyset(&anomaly_base, &spec.toy, root, category)?;
    Ok(cat)
}
