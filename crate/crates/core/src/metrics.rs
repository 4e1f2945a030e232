//! Distortion metrics on images in `[0, 1]`: MSE, PSNR, SSIM and a
//! differentiable multiscale SSIM.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{PadSpec, Tensor};

/// Lower bound applied to per-scale terms before exponentiation.
const TERM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl MsSsimConfig {
    fn c1(&self) -> f64 {
        self.k1 * self.k1
    }

    fn c2(&self) -> f64 {
        self.k2 * self.k2
    }

    /// Normalized 1D Gaussian window.
    pub fn window_1d(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let mut w: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                math::exp(-d * d / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let s: f64 = w.iter().sum();
        for v in &mut w {
            *v /= s;
        }
        w
    }

    /// Scale weights usable for an `h × w` image: scales are dropped from the
    /// coarse end until the coarsest level is at least one window wide, and
    /// the survivors are renormalized to sum to one.
    pub fn effective_weights(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let mut scales = 0;
        let (mut hh, mut ww) = (h, w);
        while scales < self.weights.len() && hh >= self.window && ww >= self.window {
            scales += 1;
            hh /= 2;
            ww /= 2;
        }
        if scales == 0 {
            return Err(Error::invalid(alloc::format!("image {h}x{w} smaller than the {} pixel window", self.window)));
        }
        if scales < self.weights.len() {
            log::warn!("ms-ssim: {h}x{w} image supports only {scales} of {} scales; weights renormalized", self.weights.len());
        }
        let sum: f64 = self.weights[..scales].iter().sum();
        Ok(self.weights[..scales].iter().map(|w| w / sum).collect())
    }
}

/// Per-channel multiscale SSIM, averaged over channels. Inputs are `[C,H,W]`.
pub fn ms_ssim_graph(g: &mut Graph, x: Var, y: Var, cfg: &MsSsimConfig) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || g.shape(y) != shape.as_slice() {
        return Err(Error::shape("ms_ssim", &shape, g.shape(y)));
    }
    let weights = cfg.effective_weights(shape[1], shape[2])?;
    let win = cfg.window_1d();
    let wh = g.constant(Tensor::new(&[1, 1, 1, cfg.window], win.clone())?);
    let wv = g.constant(Tensor::new(&[1, 1, cfg.window, 1], win)?);
    let pool = g.constant(Tensor::full(&[1, 1, 2, 2], 0.25));
    let mut total: Option<Var> = None;
    for c in 0..shape[0] {
        let mut xc = g.slice0(x, c, 1)?;
        let mut yc = g.slice0(y, c, 1)?;
        let mut value: Option<Var> = None;
        for (j, &wj) in weights.iter().enumerate() {
            if j > 0 {
                xc = g.conv2d(xc, pool, None, 2, PadSpec::NONE)?;
                yc = g.conv2d(yc, pool, None, 2, PadSpec::NONE)?;
            }
            let (l, cs) = ssim_maps(g, xc, yc, wh, wv, cfg)?;
            let term = if j + 1 == weights.len() { g.mul(l, cs)? } else { cs };
            let m = g.mean(term);
            let m = g.clamp_min(m, TERM_FLOOR);
            let p = g.powf(m, wj);
            value = Some(match value {
                Some(v) => g.mul(v, p)?,
                None => p,
            });
        }
        let v = value.expect("at least one scale");
        total = Some(match total {
            Some(t) => g.add(t, v)?,
            None => v,
        });
    }
    let t = total.ok_or_else(|| Error::invalid("ms_ssim of an image with no channels"))?;
    Ok(g.scale(t, 1.0 / shape[0] as f64))
}

fn blur(g: &mut Graph, a: Var, wh: Var, wv: Var) -> Result<Var> {
    let a = g.conv2d(a, wh, None, 1, PadSpec::NONE)?;
    g.conv2d(a, wv, None, 1, PadSpec::NONE)
}

/// Luminance and contrast-structure maps of single-channel images.
fn ssim_maps(g: &mut Graph, x: Var, y: Var, wh: Var, wv: Var, cfg: &MsSsimConfig) -> Result<(Var, Var)> {
    let mx = blur(g, x, wh, wv)?;
    let my = blur(g, y, wh, wv)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = blur(g, xx, wh, wv)?;
    let eyy = blur(g, yy, wh, wv)?;
    let exy = blur(g, xy, wh, wv)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;

    let num = g.add(cxy, cxy)?;
    let num = g.add_scalar(num, cfg.c2());
    let den = g.add(vx, vy)?;
    let den = g.add_scalar(den, cfg.c2());
    let cs = g.div(num, den)?;

    let lnum = g.add(mxy, mxy)?;
    let lnum = g.add_scalar(lnum, cfg.c1());
    let lden = g.add(mx2, my2)?;
    let lden = g.add_scalar(lden, cfg.c1());
    let l = g.div(lnum, lden)?;
    Ok((l, cs))
}

/// MS-SSIM `d ∈ [0, 1]` of two `[C,H,W]` images.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    ms_ssim_with(x, y, &MsSsimConfig::default())
}

pub fn ms_ssim_with(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    let mut g = Graph::inference();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let d = ms_ssim_graph(&mut g, xv, yv, cfg)?;
    g.value(d).item()
}

/// Single-scale SSIM, averaged over positions and channels.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let cfg = MsSsimConfig {
        weights: vec![1.0],
        ..MsSsimConfig::default()
    };
    if x.shape() != y.shape() || x.rank() != 3 {
        return Err(Error::shape("ssim", x.shape(), y.shape()));
    }
    if x.dim(1) < cfg.window || x.dim(2) < cfg.window {
        return Err(Error::invalid("image smaller than the SSIM window"));
    }
    let mut g = Graph::inference();
    let win = cfg.window_1d();
    let wh = g.constant(Tensor::new(&[1, 1, 1, cfg.window], win.clone())?);
    let wv = g.constant(Tensor::new(&[1, 1, cfg.window, 1], win)?);
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let mut acc = 0.0;
    for c in 0..x.dim(0) {
        let xc = g.slice0(xv, c, 1)?;
        let yc = g.slice0(yv, c, 1)?;
        let (l, cs) = ssim_maps(&mut g, xc, yc, wh, wv, &cfg)?;
        let m = g.mul(l, cs)?;
        let m = g.mean(m);
        acc += g.value(m).item()?;
    }
    Ok(acc / x.dim(0) as f64)
}

/// `−10 log₁₀(1 − d)`; `+∞` when `d = 1`.
pub fn msssim_db(d: f64) -> f64 {
    if d >= 1.0 {
        f64::INFINITY
    } else {
        -10.0 * math::log10(1.0 - d)
    }
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("mse", x.shape(), y.shape()));
    }
    if x.is_empty() {
        return Err(Error::invalid("mse of empty tensors"));
    }
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.len() as f64)
}

/// `−10 log₁₀(mse)` for unit peak; `+∞` for identical images.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * math::log10(m) })
}

/// Differentiable mean squared error.
pub fn mse_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let d2 = g.mul(d, d)?;
    Ok(g.mean(d2))
}
