//! Images as `[3,H,W]` tensors with samples in `[0,1]`.
//!
//! Reads binary PPM (P6, 8 or 16 bit) and PNG; writes 8-bit P6.

use std::path::Path;

use gcmc_core::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageEncoder, ImageReader};

use crate::atomic;
use crate::error::{Error, Result};

/// File extensions recognised as images.
pub const EXTENSIONS: &[&str] = &["ppm", "png"];

pub fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn from_dynamic(img: &DynamicImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let raw = rgb.as_raw();
            Tensor::from_fn(&[3, h, w], |i| raw[(i % plane) * 3 + i / plane] as f64 / 255.0)
        }
        _ => {
            let rgb = img.to_rgb16();
            let raw = rgb.as_raw();
            Tensor::from_fn(&[3, h, w], |i| raw[(i % plane) * 3 + i / plane] as f64 / 65535.0)
        }
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::format(path, e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::format(path, "empty image"));
    }
    Ok(from_dynamic(&img))
}

/// Interleaved 8-bit RGB after clamping and rounding.
pub fn to_rgb8(x: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    if x.rank() != 3 || x.dim(0) != 3 {
        return Err(Error::usage(format!("expected a [3,H,W] image, got {:?}", x.shape())));
    }
    let (h, w) = (x.dim(1), x.dim(2));
    let plane = h * w;
    let d = x.data();
    let raw = (0..3 * plane)
        .map(|i| {
            let v = d[(i % 3) * plane + i / 3];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok((h, w, raw))
}

/// Rounds samples to the 8-bit grid that [`write_ppm`] stores.
pub fn quantize8(x: &Tensor) -> Tensor {
    x.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn write_ppm(path: &Path, x: &Tensor) -> Result<()> {
    let (h, w, raw) = to_rgb8(x)?;
    atomic::write_file(path, |out| {
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&raw, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::format(path, e.to_string()))
    })
}
