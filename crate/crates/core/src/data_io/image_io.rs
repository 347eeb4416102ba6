use std::path::Path;

use ::image::imageops::{self, FilterType};
use ::image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image stored planar as `(3, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn from_array(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image needs 3 channels, got {}",
                pixels.shape()[0]
            )));
        }
        Ok(Image {
            pixels: pixels.as_standard_layout().into_owned(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Image {
            pixels: Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        Image {
            pixels: Array3::from_shape_fn((3, height, width), |(c, y, x)| f(c, y, x)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    pub fn into_array(self) -> Array3<f64> {
        self.pixels
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// ITU-R 601 luma.
    pub fn grayscale(&self) -> Array2<f64> {
        let r = self.pixels.index_axis(Axis(0), 0);
        let g = self.pixels.index_axis(Axis(0), 1);
        let b = self.pixels.index_axis(Axis(0), 2);
        &r * 0.299 + &g * 0.587 + &b * 0.114
    }

    /// A `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, 3, self.height(), self.width()],
            self.pixels.iter().copied().collect(),
        )
        .expect("standard layout")
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height() as u32, self.width() as u32);
        ImageBuffer::from_fn(w, h, |x, y| {
            let px = |c: usize| to_u8(self.pixels[[c, y as usize, x as usize]]);
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::ImageEncode {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a single-channel `[0, 1]` map as an 8-bit grayscale PNG.
pub fn save_gray_png(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(map[[y as usize, x as usize]])]));
    img.save(path).map_err(|e| Error::ImageEncode {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

fn decode(path: &Path) -> Result<::image::DynamicImage> {
    ::image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_owned(),
            reason: e.to_string(),
        })
}

/// Decode an image file into a `size × size` RGB [`Image`] in `[0, 1]`.
///
/// Grayscale inputs are replicated across the three channels, 16-bit inputs
/// are scaled by their full range, and other sizes are resampled bilinearly.
pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let rgb = decode(path)?.to_rgb32f();
    let rgb = if rgb.dimensions() != (size as u32, size as u32) {
        imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]).clamp(0.0, 1.0)
    });
    Ok(Image { pixels })
}

/// Decode a ground-truth mask, resample it to `size × size` and binarise
/// at 0.5.
pub fn load_mask(path: &Path, size: usize) -> Result<Array2<f64>> {
    let luma = decode(path)?.to_luma32f();
    let luma = if luma.dimensions() != (size as u32, size as u32) {
        imageops::resize(&luma, size as u32, size as u32, FilterType::Triangle)
    } else {
        luma
    };
    Ok(Array2::from_shape_fn((size, size), |(y, x)| {
        if luma.get_pixel(x as u32, y as u32)[0] >= 0.5 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Crop a square region (top-left `y, x`, side `side`) from an image file
/// and resample it to `size × size`.
pub(crate) fn load_crop(path: &Path, size: usize, pick: impl FnOnce(u32, u32) -> (u32, u32, u32)) -> Result<Image> {
    let rgb = decode(path)?.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let (y, x, side) = pick(w, h);
    let crop = imageops::crop_imm(&rgb, x, y, side, side).to_image();
    let crop = imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
    let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        f64::from(crop.get_pixel(x as u32, y as u32)[c]).clamp(0.0, 1.0)
    });
    Ok(Image { pixels })
}
