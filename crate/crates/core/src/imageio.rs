//! In-memory image representation and PNG round-tripping.
//!
//! Images are (3, H, W) f32 arrays with values in [0, 1]; masks are (H, W)
//! bool arrays. The u8 conversion uses round-to-nearest, so a PNG loaded into
//! f32 and saved again is byte-identical. Subject preservation downstream
//! relies on that exactness.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

pub type Image = Array3<f32>;
pub type Mask = Array2<bool>;

pub fn solid(h: usize, w: usize, rgb: [f32; 3]) -> Image {
    Array3::from_shape_fn((3, h, w), |(c, _, _)| rgb[c])
}

pub fn to_rgb8(img: &Image) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn from_rgb8(data: &[u8], h: usize, w: usize) -> Image {
    Array3::from_shape_fn((3, h, w), |(c, y, x)| data[(y * w + x) * 3 + c] as f32 / 255.0)
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = to_rgb8(img);
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(Error::from)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(from_rgb8(img.as_raw(), h, w))
}

/// Mask as an 8-bit grayscale PNG, 255 inside.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8)
        .map_err(Error::from)
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| raw[y * w + x] >= 128))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // Every u8 value appears somewhere.
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c * 85 + y * 16 + x) % 256) as f32 / 255.0
        });
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(to_rgb8(&img), to_rgb8(&back));
        assert_eq!(img, back);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| (y + x) % 3 == 0);
        save_mask_png(&path, &mask).unwrap();
        assert_eq!(load_mask_png(&path).unwrap(), mask);
    }
}
