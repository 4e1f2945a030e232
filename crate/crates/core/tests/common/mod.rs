//! Independent reference implementations used as test oracles. Everything
//! here is written as directly as possible, without sharing code with the
//! library.
#![allow(dead_code)]

use gcmc_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values with magnitude in `[lo, hi]` and random sign, away from kinks.
pub fn away_from_zero(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = r.gen_range(lo..hi);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Direct zero-padded cross-correlation with six nested loops.
pub fn conv2d_loops(x: &Tensor, k: &Tensor, stride: usize, pad: (usize, usize, usize, usize)) -> Tensor {
    let (cin, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
    let (top, bottom, left, right) = pad;
    let ho = (h + top + bottom - kh) / stride + 1;
    let wo = (w + left + right - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - top as isize;
                            let ix = (ox * stride + kx) as isize - left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.get(&[co, ci, ky, kx]).unwrap() * x.get(&[ci, iy as usize, ix as usize]).unwrap();
                        }
                    }
                }
                out.set(&[co, oy, ox], acc).unwrap();
            }
        }
    }
    out
}

/// Transposed convolution as explicit stamping of each input pixel,
/// followed by cropping `(top, bottom, left, right)`.
pub fn conv2d_transpose_loops(x: &Tensor, k: &Tensor, stride: usize, crop: (usize, usize, usize, usize)) -> Tensor {
    let (cin, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kh, kw) = (k.dim(1), k.dim(2), k.dim(3));
    let (fh, fw) = (stride * (h - 1) + kh, stride * (w - 1) + kw);
    let mut full = Tensor::zeros(&[cout, fh, fw]);
    for ci in 0..cin {
        for y in 0..h {
            for xx in 0..w {
                let v = x.get(&[ci, y, xx]).unwrap();
                for co in 0..cout {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let idx = [co, y * stride + ky, xx * stride + kx];
                            let cur = full.get(&idx).unwrap();
                            full.set(&idx, cur + v * k.get(&[ci, co, ky, kx]).unwrap()).unwrap();
                        }
                    }
                }
            }
        }
    }
    let (top, bottom, left, right) = crop;
    let (oh, ow) = (fh - top - bottom, fw - left - right);
    Tensor::from_fn(&[cout, oh, ow], |i| {
        let (c, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        full.get(&[c, y + top, xx + left]).unwrap()
    })
}

/// Masked 3D "same" cross-correlation over `[F,D,H,W]`.
pub fn conv3d_masked_loops(x: &Tensor, k: &Tensor, mask: &Tensor) -> Tensor {
    let (fi, d, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (fo, kd, kh, kw) = (k.dim(0), k.dim(2), k.dim(3), k.dim(4));
    let (rd, rh, rw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(&[fo, d, h, w]);
    for o in 0..fo {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..fi {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let idx = [o, i, a, b, c];
                                    if mask.get(&idx).unwrap() == 0.0 {
                                        continue;
                                    }
                                    let zz = z as isize + a as isize - rd;
                                    let yy = y as isize + b as isize - rh;
                                    let xs = xx as isize + c as isize - rw;
                                    if zz < 0 || yy < 0 || xs < 0 || zz >= d as isize || yy >= h as isize || xs >= w as isize {
                                        continue;
                                    }
                                    acc += k.get(&idx).unwrap() * x.get(&[i, zz as usize, yy as usize, xs as usize]).unwrap();
                                }
                            }
                        }
                    }
                    out.set(&[o, z, y, xx], acc).unwrap();
                }
            }
        }
    }
    out
}

/// `erf` by its Maclaurin series; accurate to ~1e-16 for `|x| < 2`.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x * x / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-20 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn phi_series(t: f64) -> f64 {
    0.5 * (1.0 + erf_series(t / std::f64::consts::SQRT_2))
}

/// Scalar SSIM components of one channel at one scale, evaluated window by
/// window: `(mean luminance·cs, mean cs)`.
fn ssim_terms_scalar(x: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = 11usize;
    let g: Vec<f64> = {
        let raw: Vec<f64> = (0..win).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let (h, w) = (x.len(), x[0].len());
    let (mut sum_ssim, mut sum_cs, mut count) = (0.0, 0.0, 0.0);
    for oy in 0..=h - win {
        for ox in 0..=w - win {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..win {
                for b in 0..win {
                    let wt = g[a] * g[b];
                    let (u, v) = (x[oy + a][ox + b], y[oy + a][ox + b]);
                    mx += wt * u;
                    my += wt * v;
                    sxx += wt * u * u;
                    syy += wt * v * v;
                    sxy += wt * u * v;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            sum_ssim += l * cs;
            sum_cs += cs;
            count += 1.0;
        }
    }
    (sum_ssim / count, sum_cs / count)
}

fn channel(t: &Tensor, c: usize) -> Vec<Vec<f64>> {
    (0..t.dim(1)).map(|y| (0..t.dim(2)).map(|x| t.get(&[c, y, x]).unwrap()).collect()).collect()
}

fn halve(img: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (img.len() / 2, img[0].len() / 2);
    (0..h)
        .map(|y| (0..w).map(|x| (img[2 * y][2 * x] + img[2 * y][2 * x + 1] + img[2 * y + 1][2 * x] + img[2 * y + 1][2 * x + 1]) / 4.0).collect())
        .collect()
}

/// Multiscale SSIM written out scalar by scalar.
pub fn ms_ssim_scalar(x: &Tensor, y: &Tensor) -> f64 {
    let base = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut scales = 0;
    let (mut h, mut w) = (x.dim(1), x.dim(2));
    while scales < 5 && h >= 11 && w >= 11 {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    let total: f64 = base[..scales].iter().sum();
    let weights: Vec<f64> = base[..scales].iter().map(|v| v / total).collect();
    let mut acc = 0.0;
    for c in 0..x.dim(0) {
        let (mut xs, mut ys) = (channel(x, c), channel(y, c));
        let mut prod = 1.0;
        for (j, wj) in weights.iter().enumerate() {
            if j > 0 {
                xs = halve(&xs);
                ys = halve(&ys);
            }
            let (s, cs) = ssim_terms_scalar(&xs, &ys);
            let term = if j + 1 == scales { s } else { cs };
            prod *= term.max(1e-6).powf(*wj);
        }
        acc += prod;
    }
    acc / x.dim(0) as f64
}

pub fn ssim_scalar(x: &Tensor, y: &Tensor) -> f64 {
    let mut acc = 0.0;
    for c in 0..x.dim(0) {
        acc += ssim_terms_scalar(&channel(x, c), &channel(y, c)).0;
    }
    acc / x.dim(0) as f64
}

/// A smooth random test image in `[0,1]`: a few blurred blobs plus noise.
pub fn smooth_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                r.gen_range(0.0..h as f64),
                r.gen_range(0.0..w as f64),
                r.gen_range(3.0..(h.max(w) as f64 / 2.0).max(4.0)),
                [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)],
            )
        })
        .collect();
    let noise: Vec<f64> = (0..3 * h * w).map(|_| r.gen_range(-0.03..0.03)).collect();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut v = 0.5;
        for (by, bx, s, amp) in &blobs {
            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
            v += amp[c] * (-d2 / (2.0 * s * s)).exp();
        }
        (v + noise[i]).clamp(0.0, 1.0)
    })
}
