use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::network::AnomalyMap;

/// Fixed "jet" colour ramp: dark blue at 0, through cyan, yellow, to dark
/// red at 1. Inputs are clamped to `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let ramp = |x: f64| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)].map(|c| (c * 255.0).round() as u8)
}

pub fn save_heatmap(map: &AnomalyMap, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(colormap(map.probs[[y as usize, x as usize]])));
    img.save(path).map_err(|e| Error::ImageEncode {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}
