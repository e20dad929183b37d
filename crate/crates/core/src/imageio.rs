//! Conversions between in-memory rasters and image files.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::{Mask, Plane, RgbImage};

pub fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::image(path, e))
}

/// Reads any supported raster as RGB normalized to [0, 1].
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, px.0.map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Reads a label raster and binarizes its luminance at mid-gray.
pub fn read_binary(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(binarize_gray(w, h, img.as_raw()))
}

/// 8-bit values at or above 128 become foreground.
pub fn binarize_gray(width: usize, height: usize, values: &[u8]) -> Mask {
    Mask::from_fn(width, height, |x, y| values[y * width + x] >= 128)
}

/// Binary masks are written as 8-bit {0, 255}.
pub fn write_binary(path: &Path, mask: &Mask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| v * 255).collect(),
    )
    .expect("buffer length matches dims");
    save(path, DynamicImage::ImageLuma8(buf))
}

/// Real-valued planes are quantized to 16 bits.
pub fn write_gray16(path: &Path, plane: &Plane) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        plane.width() as u32,
        plane.height() as u32,
        plane.data().iter().map(|&v| quantize16(v)).collect(),
    )
    .expect("buffer length matches dims");
    save(path, DynamicImage::ImageLuma16(buf))
}

pub fn read_gray16(path: &Path) -> Result<Plane> {
    let img = open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Plane::from_vec(w, h, img.as_raw().iter().map(|&v| f32::from(v) / 65535.0).collect())
}

pub fn write_rgb16(path: &Path, rgb: &RgbImage) -> Result<()> {
    let (w, h) = rgb.dims();
    let mut raw = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            raw.extend(rgb.get(x, y).map(quantize16));
        }
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches dims");
    save(path, DynamicImage::ImageRgb16(buf))
}

pub fn read_rgb16(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, px.0.map(|v| f32::from(v) / 65535.0));
    }
    Ok(out)
}

pub fn write_rgb8(path: &Path, rgb: &RgbImage) -> Result<()> {
    save(path, DynamicImage::ImageRgb8(to_rgb8(rgb)))
}

pub fn to_rgb8(rgb: &RgbImage) -> image::RgbImage {
    let (w, h) = rgb.dims();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(rgb.get(x as usize, y as usize).map(quantize8))
    })
}

pub fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize16(v: f32) -> u16 {
    (f64::from(v.clamp(0.0, 1.0)) * 65535.0).round() as u16
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write-then-rename so concurrent readers never observe a partial file.
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|e| Error::image(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
