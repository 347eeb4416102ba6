use ndarray::{Array2, Zip};

use crate::data_io::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRole {
    /// Thresholded Perlin noise.
    Perlin,
    /// Object foreground of the input image.
    Foreground,
    /// Final anomaly region.
    Combined,
    /// Complement of another mask.
    Inverted,
}

/// An `H×W` mask whose values are exactly `0.0` or `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    values: Array2<f64>,
    role: MaskRole,
}

impl BinaryMask {
    pub fn from_array(values: Array2<f64>, role: MaskRole) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidConfig("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { values, role })
    }

    pub fn from_fn(dim: (usize, usize), role: MaskRole, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        BinaryMask {
            values: Array2::from_shape_fn(dim, |(y, x)| if f(y, x) { 1.0 } else { 0.0 }),
            role,
        }
    }

    pub fn zeros(dim: (usize, usize), role: MaskRole) -> Self {
        BinaryMask {
            values: Array2::zeros(dim),
            role,
        }
    }

    pub fn ones(dim: (usize, usize), role: MaskRole) -> Self {
        BinaryMask {
            values: Array2::ones(dim),
            role,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn with_role(mut self, role: MaskRole) -> Self {
        self.role = role;
        self
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[[y, x]] == 1.0
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.values.len() as f64
    }

    /// `1 − m`, tagged [`MaskRole::Inverted`].
    pub fn inverted(&self) -> Self {
        BinaryMask {
            values: self.values.mapv(|v| 1.0 - v),
            role: MaskRole::Inverted,
        }
    }
}

/// Elementwise product `mp ⊙ mi`; `mp` alone when there is no foreground
/// mask.
pub fn combine_masks(mp: &BinaryMask, mi: Option<&BinaryMask>) -> Result<BinaryMask> {
    let Some(mi) = mi else {
        return Ok(mp.clone().with_role(MaskRole::Combined));
    };
    if mp.dim() != mi.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cannot combine masks of size {:?} and {:?}",
            mp.dim(),
            mi.dim()
        )));
    }
    Ok(BinaryMask {
        values: &mp.values * &mi.values,
        role: MaskRole::Combined,
    })
}

/// Otsu's threshold over a 256-bin histogram of `[0, 1]` values. Returns
/// `None` for a constant image.
pub fn otsu_threshold(gray: &Array2<f64>) -> Option<f64> {
    let (lo, hi) = gray
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo > 1e-12) {
        return None;
    }
    let mut hist = [0usize; 256];
    for &v in gray {
        hist[((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(255)] += 1;
    }
    let total = gray.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    // pixels in bins <= best_t are background candidates
    Some((best_t as f64 + 0.5) / 255.0)
}

fn filter(values: &Array2<f64>, kernel: usize, take_max: bool) -> Array2<f64> {
    let (h, w) = values.dim();
    let before = (kernel - 1) / 2;
    let after = kernel - 1 - before;
    let pick = |a: f64, b: f64| if take_max { a.max(b) } else { a.min(b) };
    let init = if take_max { f64::NEG_INFINITY } else { f64::INFINITY };
    // separable: rows then columns; out-of-range neighbours are ignored
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        let (x0, x1) = (x.saturating_sub(before), (x + after).min(w - 1));
        (x0..=x1).fold(init, |m, xx| pick(m, values[[y, xx]]))
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1) = (y.saturating_sub(before), (y + after).min(h - 1));
        (y0..=y1).fold(init, |m, yy| pick(m, rows[[yy, x]]))
    })
}

pub fn erode(values: &Array2<f64>, kernel: usize) -> Array2<f64> {
    filter(values, kernel, false)
}

pub fn dilate(values: &Array2<f64>, kernel: usize) -> Array2<f64> {
    filter(values, kernel, true)
}

/// Erosion followed by dilation; removes specks smaller than the kernel.
pub fn opening(values: &Array2<f64>, kernel: usize) -> Array2<f64> {
    dilate(&erode(values, kernel), kernel)
}

/// Dilation followed by erosion; fills holes smaller than the kernel.
pub fn closing(values: &Array2<f64>, kernel: usize) -> Array2<f64> {
    erode(&dilate(values, kernel), kernel)
}

fn border_count(values: &Array2<f64>) -> usize {
    let (h, w) = values.dim();
    values
        .indexed_iter()
        .filter(|&((y, x), &v)| v == 1.0 && (y == 0 || x == 0 || y == h - 1 || x == w - 1))
        .count()
}

/// Object foreground of an image.
///
/// Grayscale, Otsu binarisation, polarity chosen so the region touching the
/// image border least is the foreground, then opening and closing with a
/// `kernel × kernel` square. A constant image yields an all-ones mask.
pub fn foreground_mask(img: &Image, kernel: usize) -> BinaryMask {
    let gray = img.grayscale();
    let dim = gray.dim();
    let Some(t) = otsu_threshold(&gray) else {
        log::warn!("constant image; foreground mask covers the whole image");
        return BinaryMask::ones(dim, MaskRole::Foreground);
    };
    let bright = gray.mapv(|v| if v > t { 1.0 } else { 0.0 });
    let dark = bright.mapv(|v| 1.0 - v);
    let chosen = if border_count(&dark) < border_count(&bright) {
        dark
    } else {
        bright
    };
    let kernel = kernel.max(1);
    let cleaned = closing(&opening(&chosen, kernel), kernel);
    BinaryMask {
        values: cleaned,
        role: MaskRole::Foreground,
    }
}

/// Intersection-over-union of two masks.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    Zip::from(a.values()).and(b.values()).for_each(|&x, &y| {
        if x == 1.0 && y == 1.0 {
            inter += 1;
        }
        if x == 1.0 || y == 1.0 {
            union += 1;
        }
    });
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk(size: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn((size, size), MaskRole::Foreground, |y, x| {
            (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
        })
    }

    #[test]
    fn inversion_is_complement() {
        let m = disk(16, 8.0, 8.0, 4.0);
        let inv = m.inverted();
        assert_eq!(inv.role(), MaskRole::Inverted);
        for (a, b) in m.values().iter().zip(inv.values()) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn combining_with_ones_is_identity() {
        let mp = disk(16, 5.0, 5.0, 3.0).with_role(MaskRole::Perlin);
        let ones = BinaryMask::ones((16, 16), MaskRole::Foreground);
        assert_eq!(combine_masks(&mp, Some(&ones)).unwrap().values(), mp.values());
        assert_eq!(combine_masks(&mp, None).unwrap().values(), mp.values());
    }

    #[test]
    fn combining_equals_elementwise_and() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a = BinaryMask::from_fn((8, 8), MaskRole::Perlin, |_, _| rng.gen_bool(0.5));
            let b = BinaryMask::from_fn((8, 8), MaskRole::Foreground, |_, _| rng.gen_bool(0.5));
            let c = combine_masks(&a, Some(&b)).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(c.get(y, x), a.get(y, x) && b.get(y, x));
                }
            }
        }
    }

    #[test]
    fn combining_mismatched_sizes_fails() {
        let a = BinaryMask::zeros((4, 4), MaskRole::Perlin);
        let b = BinaryMask::zeros((4, 5), MaskRole::Foreground);
        assert!(combine_masks(&a, Some(&b)).is_err());
    }

    #[test]
    fn white_disk_on_black_is_foreground() {
        let truth = disk(128, 60.0, 70.0, 30.0);
        let img = Image::from_fn(128, 128, |_, y, x| if truth.get(y, x) { 1.0 } else { 0.0 });
        let fg = foreground_mask(&img, 5);
        assert!(iou(&fg, &truth) > 0.95, "iou {}", iou(&fg, &truth));
    }

    #[test]
    fn dark_object_on_bright_background_is_foreground() {
        let truth = disk(96, 48.0, 48.0, 20.0);
        let img = Image::from_fn(96, 96, |_, y, x| if truth.get(y, x) { 0.1 } else { 0.9 });
        let fg = foreground_mask(&img, 3);
        assert!(iou(&fg, &truth) > 0.95);
    }

    #[test]
    fn constant_image_gives_full_mask() {
        let img = Image::filled(20, 20, [0.4, 0.4, 0.4]);
        assert_eq!(foreground_mask(&img, 3).count(), 400);
    }

    #[test]
    fn isolated_pixel_removed_by_opening() {
        let mut v = Array2::zeros((64, 64));
        v[[30, 30]] = 1.0;
        assert_eq!(opening(&v, 3).sum(), 0.0);
        // a 5x5 block survives a 3x3 opening intact
        v.slice_mut(ndarray::s![10..15, 10..15]).fill(1.0);
        let o = opening(&v, 3);
        assert_eq!(o.sum(), 25.0);
    }

    #[test]
    fn otsu_splits_bimodal_values() {
        let g = Array2::from_shape_fn((10, 10), |(y, _)| if y < 5 { 0.2 } else { 0.8 });
        let t = otsu_threshold(&g).unwrap();
        assert!(t > 0.2 && t < 0.8);
    }
}
