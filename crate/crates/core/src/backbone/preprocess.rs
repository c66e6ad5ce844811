//! Image loading: shortest-side resize, center crop, scale to `[-1, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Resizes the shortest side to `size` (Catmull-Rom) and center-crops to
/// `size x size`. Images already at `size x size` pass through untouched.
pub fn resize_and_crop(img: &DynamicImage, size: usize) -> RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let size32 = size as u32;
    if w == size32 && h == size32 {
        return rgb;
    }
    let scale = size as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(size32);
    let nh = ((h as f64 * scale).round() as u32).max(size32);
    let resized = image::imageops::resize(&rgb, nw, nh, FilterType::CatmullRom);
    let x0 = (nw - size32) / 2;
    let y0 = (nh - size32) / 2;
    image::imageops::crop_imm(&resized, x0, y0, size32, size32).to_image()
}

/// `(3, H, W)` channel-first array with values `v / 127.5 - 1`.
pub fn to_pixels(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    })
}

pub fn prepare_image(path: &Path, size: usize) -> Result<Array3<f32>> {
    Ok(to_pixels(&resize_and_crop(&load_image(path)?, size)))
}
