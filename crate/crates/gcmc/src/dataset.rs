//! Training images and random crops.

use std::path::Path;

use gcmc_core::codec::reflect_pad;
use gcmc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<(String, Tensor)>,
}

impl Dataset {
    pub fn from_images(images: Vec<(String, Tensor)>) -> Self {
        Dataset { images }
    }

    /// Every PPM/PNG file directly inside `dir`, in file-name order.
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::usage(format!("{}: dataset directory not found", dir.display())));
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && imageio::is_image(p))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::usage(format!("{}: no .ppm or .png images", dir.display())));
        }
        let images = paths
            .iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, imageio::read_image(p)?))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `size` images with uniform random sources and offsets, drawn from a
    /// stream keyed by `(seed, step)`. Images smaller than the crop are
    /// reflect-padded first.
    pub fn batch(&self, seed: u64, step: u64, count: usize, size: usize) -> Result<Vec<Tensor>> {
        if self.images.is_empty() {
            return Err(Error::usage("dataset is empty"));
        }
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..count)
            .map(|_| {
                let (_, img) = &self.images[r.gen_range(0..self.images.len())];
                let (h, w) = (img.dim(1).max(size), img.dim(2).max(size));
                let src = if (h, w) != (img.dim(1), img.dim(2)) { reflect_pad(img, h, w)? } else { img.clone() };
                let (oy, ox) = (r.gen_range(0..=h - size), r.gen_range(0..=w - size));
                Ok(Tensor::from_fn(&[3, size, size], |i| {
                    let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
                    src.data()[(c * h + oy + y) * w + ox + x]
                }))
            })
            .collect()
    }
}

/// A deterministic natural-ish image: a colour gradient with a few flat
/// shapes and soft texture, on the 8-bit grid.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut base = [[0.0; 3]; 3];
    for row in &mut base {
        for v in row.iter_mut() {
            *v = r.gen_range(0.0..1.0);
        }
    }
    let mut img = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (fy, fx) = (y as f64 / h.max(2) as f64, x as f64 / w.max(2) as f64);
        base[c][0] * (1.0 - fy) * (1.0 - fx) + base[c][1] * fy + base[c][2] * fx * (1.0 - fy)
    });
    let shapes = r.gen_range(3..8);
    for _ in 0..shapes {
        let colour: [f64; 3] = [r.gen(), r.gen(), r.gen()];
        let (cy, cx) = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64));
        let size = r.gen_range(0.1..0.4) * h.min(w) as f64 + 1.0;
        let disc = r.gen_bool(0.5);
        let alpha = r.gen_range(0.5..1.0);
        let d = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc { dy * dy + dx * dx < size * size } else { dy.abs() < size && dx.abs() < 0.7 * size };
                if inside {
                    for (c, col) in colour.iter().enumerate() {
                        let v = &mut d[(c * h + y) * w + x];
                        *v = (1.0 - alpha) * *v + alpha * col;
                    }
                }
            }
        }
    }
    let (fy, fx, phase) = (r.gen_range(0.05..0.5), r.gen_range(0.05..0.5), r.gen_range(0.0..6.3));
    let amp = r.gen_range(0.0..0.08);
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        *v += amp * (fy * y as f64 + fx * x as f64 + phase).sin();
    }
    crate::imageio::quantize8(&img)
}

/// `count` synthetic images named `synthetic_NNN`.
pub fn synthetic(count: usize, h: usize, w: usize, seed: u64) -> Dataset {
    Dataset::from_images((0..count).map(|i| (format!("synthetic_{i:03}"), synthetic_image(h, w, seed.wrapping_add(i as u64 * 7919)))).collect())
}
