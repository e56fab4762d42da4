//! PNG I/O: 8-bit RGB for SDR, 16-bit RGB for HDR (big-endian samples per
//! the PNG specification, handled by the `image` crate).

use super::quant::{dequantize_value, quantize_value};
use super::{ColorState, ImagePlanar};
use crate::error::{Error, Result};
use image::{DynamicImage, ImageBuffer, Rgb};
use std::path::Path;

/// Read an 8-bit SDR PNG as a gamma-encoded Rec.709 image.
pub fn read_sdr_png(path: &Path) -> Result<ImagePlanar> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb8(b) => b,
        DynamicImage::ImageRgba8(b) => DynamicImage::ImageRgba8(b).to_rgb8(),
        DynamicImage::ImageLuma8(b) => DynamicImage::ImageLuma8(b).to_rgb8(),
        DynamicImage::ImageLumaA8(b) => DynamicImage::ImageLumaA8(b).to_rgb8(),
        other => {
            return Err(Error::Data(format!(
                "{}: expected 8-bit SDR PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = dequantize_value(px.0[c] as u16, 8);
        }
    }
    ImagePlanar::new(h, w, data, ColorState::SDR)
}

/// Read a 16-bit HDR PNG as a PQ-encoded Rec.2020 image.
pub fn read_hdr_png(path: &Path) -> Result<ImagePlanar> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb16(b) => b,
        DynamicImage::ImageRgba16(b) => DynamicImage::ImageRgba16(b).to_rgb16(),
        DynamicImage::ImageLuma16(b) => DynamicImage::ImageLuma16(b).to_rgb16(),
        other => {
            return Err(Error::Data(format!(
                "{}: expected 16-bit HDR PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = dequantize_value(px.0[c], 16);
        }
    }
    ImagePlanar::new(h, w, data, ColorState::HDR)
}

/// Write an 8-bit RGB PNG (SDR).
pub fn write_sdr_png(img: &ImagePlanar, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    let src = img.data();
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = quantize_value(src[c * hw + i], 8) as u8;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write a 16-bit RGB PNG (HDR).
pub fn write_hdr_png(img: &ImagePlanar, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    let src = img.data();
    let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = quantize_value(src[c * hw + i], 16);
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
