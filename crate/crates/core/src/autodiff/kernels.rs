//! Raw convolution loops. Forward, input-gradient and weight-gradient share
//! one iteration scheme so results are reproducible bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{PadSpec, Tensor};

/// Output indices `o` in `[0, out_len)` whose input `o*stride + k - lead`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(k: usize, lead: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if lead > k { (lead - k).div_ceil(stride) } else { 0 };
    if in_len + lead <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + lead - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: PadSpec,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: PadSpec) -> Result<Self> {
        if x.len() != 3 || k.len() != 4 || x[0] != k[1] {
            return Err(Error::shape("conv2d", x, k));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (hp, wp) = (x[1] + pad.vertical(), x[2] + pad.horizontal());
        if k[2] > hp || k[3] > wp || k[2] == 0 || k[3] == 0 {
            return Err(Error::shape("conv2d", x, k));
        }
        Ok(Conv2dGeom {
            cin: x[0],
            h: x[1],
            w: x[2],
            cout: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
            ho: (hp - k[2]) / stride + 1,
            wo: (wp - k[3]) / stride + 1,
        })
    }
}

/// Output rows per im2col tile, chosen so a tile covers about `TILE` positions.
const TILE: usize = 512;

fn tile_rows(g: &Conv2dGeom) -> usize {
    (TILE / g.wo.max(1)).clamp(1, g.ho.max(1))
}

/// Fills `col[k][p]` for the output rows `oy0..oy1`, with
/// `k = (ci·kh + ky)·kw + kx` and zeros where the tap falls in padding.
fn im2col(g: &Conv2dGeom, x: &[f64], oy0: usize, oy1: usize, col: &mut [f64]) {
    let (s, hw) = (g.stride, g.h * g.w);
    let len = (oy1 - oy0) * g.wo;
    let mut k = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let (vy0, vy1) = valid_range(ky, g.pad.top, s, g.h, g.ho);
            for kx in 0..g.kw {
                let (vx0, vx1) = valid_range(kx, g.pad.left, s, g.w, g.wo);
                let dst = &mut col[k * len..(k + 1) * len];
                for oy in oy0..oy1 {
                    let row = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if oy < vy0 || oy >= vy1 || vx0 >= vx1 {
                        row.fill(0.0);
                        continue;
                    }
                    let irow = &plane[(oy * s + ky - g.pad.top) * g.w..][..g.w];
                    row[..vx0].fill(0.0);
                    row[vx1..].fill(0.0);
                    if s == 1 {
                        let ix0 = vx0 + kx - g.pad.left;
                        row[vx0..vx1].copy_from_slice(&irow[ix0..ix0 + vx1 - vx0]);
                    } else {
                        for ox in vx0..vx1 {
                            row[ox] = irow[ox * s + kx - g.pad.left];
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds `col` back into `x`.
fn col2im(g: &Conv2dGeom, col: &[f64], oy0: usize, oy1: usize, x: &mut [f64]) {
    let (s, hw) = (g.stride, g.h * g.w);
    let len = (oy1 - oy0) * g.wo;
    let mut k = 0;
    for ci in 0..g.cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            let (vy0, vy1) = valid_range(ky, g.pad.top, s, g.h, g.ho);
            for kx in 0..g.kw {
                let (vx0, vx1) = valid_range(kx, g.pad.left, s, g.w, g.wo);
                let src = &col[k * len..(k + 1) * len];
                for oy in oy0.max(vy0)..oy1.min(vy1) {
                    let row = &src[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    let irow = &mut plane[(oy * s + ky - g.pad.top) * g.w..][..g.w];
                    if s == 1 {
                        let ix0 = vx0 + kx - g.pad.left;
                        for (i, v) in irow[ix0..].iter_mut().zip(&row[vx0..vx1]) {
                            *i += v;
                        }
                    } else {
                        for ox in vx0..vx1 {
                            irow[ox * s + kx - g.pad.left] += row[ox];
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with four interleaved partial sums, combined in fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[co] += Σ w[co,ci,ky,kx] · x_padded[ci, oy·s+ky, ox·s+kx]`.
pub(crate) fn conv2d_acc(g: &Conv2dGeom, x: &[f64], wt: &[f64], out: &mut [f64]) {
    let (kk, ohw) = (g.cin * g.kh * g.kw, g.ho * g.wo);
    let rows = tile_rows(g);
    let mut col = vec![0.0; kk * rows * g.wo];
    let mut oy0 = 0;
    while oy0 < g.ho {
        let oy1 = (oy0 + rows).min(g.ho);
        let len = (oy1 - oy0) * g.wo;
        im2col(g, x, oy0, oy1, &mut col);
        for co in 0..g.cout {
            let dst = &mut out[co * ohw + oy0 * g.wo..][..len];
            for (k, &wv) in wt[co * kk..(co + 1) * kk].iter().enumerate() {
                axpy(dst, wv, &col[k * len..(k + 1) * len]);
            }
        }
        oy0 = oy1;
    }
}

/// Adjoint of [`conv2d_acc`] with respect to its input: scatters `gout`
/// back through the kernel into `gx`.
pub(crate) fn conv2d_input_grad_acc(g: &Conv2dGeom, gout: &[f64], wt: &[f64], gx: &mut [f64]) {
    let (kk, ohw) = (g.cin * g.kh * g.kw, g.ho * g.wo);
    let rows = tile_rows(g);
    let mut col = vec![0.0; kk * rows * g.wo];
    let mut oy0 = 0;
    while oy0 < g.ho {
        let oy1 = (oy0 + rows).min(g.ho);
        let len = (oy1 - oy0) * g.wo;
        let col = &mut col[..kk * len];
        col.fill(0.0);
        for co in 0..g.cout {
            let src = &gout[co * ohw + oy0 * g.wo..][..len];
            for (k, &wv) in wt[co * kk..(co + 1) * kk].iter().enumerate() {
                axpy(&mut col[k * len..(k + 1) * len], wv, src);
            }
        }
        col2im(g, col, oy0, oy1, gx);
        oy0 = oy1;
    }
}

/// Gradient of [`conv2d_acc`] with respect to the kernel.
pub(crate) fn conv2d_weight_grad_acc(g: &Conv2dGeom, x: &[f64], gout: &[f64], gw: &mut [f64]) {
    let (kk, ohw) = (g.cin * g.kh * g.kw, g.ho * g.wo);
    let rows = tile_rows(g);
    let mut col = vec![0.0; kk * rows * g.wo];
    let mut oy0 = 0;
    while oy0 < g.ho {
        let oy1 = (oy0 + rows).min(g.ho);
        let len = (oy1 - oy0) * g.wo;
        im2col(g, x, oy0, oy1, &mut col);
        for co in 0..g.cout {
            let src = &gout[co * ohw + oy0 * g.wo..][..len];
            for (k, gv) in gw[co * kk..(co + 1) * kk].iter_mut().enumerate() {
                *gv += dot(src, &col[k * len..(k + 1) * len]);
            }
        }
        oy0 = oy1;
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    let plane = out.len() / bias.len().max(1);
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(op, b.shape(), &[channels])),
        _ => Ok(()),
    }
}

/// Cross-correlation of `x: [Cin,H,W]` with `kernel: [Cout,Cin,kh,kw]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: PadSpec) -> Result<Tensor> {
    let g = Conv2dGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    check_bias("conv2d", bias, g.cout)?;
    let mut out = vec![0.0; g.cout * g.ho * g.wo];
    if let Some(b) = bias {
        add_bias(&mut out, b.data());
    }
    conv2d_acc(&g, x.data(), kernel.data(), &mut out);
    Tensor::new(&[g.cout, g.ho, g.wo], out)
}

/// Geometry of the convolution whose input-adjoint is the transposed
/// convolution of `x: [Cin,H,W]` with `kernel: [Cin,Cout,kh,kw]`.
pub(crate) fn transpose_geom(x: &[usize], k: &[usize], stride: usize, crop: PadSpec) -> Result<Conv2dGeom> {
    if x.len() != 3 || k.len() != 4 || x[0] != k[0] {
        return Err(Error::shape("conv2d_transpose", x, k));
    }
    if stride == 0 || x[1] == 0 || x[2] == 0 {
        return Err(Error::invalid("conv2d_transpose needs stride >= 1 and a non-empty input"));
    }
    let full_h = stride * (x[1] - 1) + k[2];
    let full_w = stride * (x[2] - 1) + k[3];
    if crop.vertical() >= full_h || crop.horizontal() >= full_w {
        return Err(Error::shape("conv2d_transpose", x, k));
    }
    Ok(Conv2dGeom {
        cin: k[1],
        h: full_h - crop.vertical(),
        w: full_w - crop.horizontal(),
        cout: k[0],
        kh: k[2],
        kw: k[3],
        stride,
        pad: crop,
        ho: x[1],
        wo: x[2],
    })
}

/// Transposed convolution: output extent `stride·(H−1) + kh − crop_total`.
pub fn conv2d_transpose(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, crop: PadSpec) -> Result<Tensor> {
    let g = transpose_geom(x.shape(), kernel.shape(), stride, crop)?;
    check_bias("conv2d_transpose", bias, g.cin)?;
    let mut out = vec![0.0; g.cin * g.h * g.w];
    if let Some(b) = bias {
        add_bias(&mut out, b.data());
    }
    conv2d_input_grad_acc(&g, x.data(), kernel.data(), &mut out);
    Tensor::new(&[g.cin, g.h, g.w], out)
}

/// One unmasked tap of a 3D kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub fo: usize,
    pub fi: usize,
    pub dz: isize,
    pub dy: isize,
    pub dx: isize,
    pub index: usize,
    pub weight: f64,
}

/// A masked 3D kernel `[Fo,Fi,kd,kh,kw]` with "same" padding, reduced to
/// the list of taps whose mask entry is nonzero.
#[derive(Clone, Debug)]
pub struct MaskedKernel {
    pub(crate) fo: usize,
    pub(crate) fi: usize,
    pub(crate) taps: Vec<Tap>,
    pub(crate) bias: Vec<f64>,
}

/// Spatial extents of a 3D feature volume `[F, D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Volume {
    pub f: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Volume {
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::shape("volume", shape, &[0, 0, 0, 0]));
        }
        Ok(Volume {
            f: shape[0],
            d: shape[1],
            h: shape[2],
            w: shape[3],
        })
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.d * self.h * self.w
    }
}

impl MaskedKernel {
    pub fn new(kernel: &Tensor, mask: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 5 {
            return Err(Error::shape("conv3d_masked", ks, mask.shape()));
        }
        if mask.shape() != ks {
            return Err(Error::shape("conv3d_masked mask", ks, mask.shape()));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        let (fo, fi, kd, kh, kw) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv3d_masked needs odd kernel extents"));
        }
        check_bias("conv3d_masked", bias, fo)?;
        let mut taps = Vec::new();
        for o in 0..fo {
            for i in 0..fi {
                for z in 0..kd {
                    for y in 0..kh {
                        for x in 0..kw {
                            let index = (((o * fi + i) * kd + z) * kh + y) * kw + x;
                            if mask.data()[index] != 0.0 {
                                taps.push(Tap {
                                    fo: o,
                                    fi: i,
                                    dz: z as isize - (kd / 2) as isize,
                                    dy: y as isize - (kh / 2) as isize,
                                    dx: x as isize - (kw / 2) as isize,
                                    index,
                                    weight: kernel.data()[index],
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(MaskedKernel {
            fo,
            fi,
            taps,
            bias: bias.map(|b| b.data().to_vec()).unwrap_or_else(|| vec![0.0; fo]),
        })
    }

    pub fn out_features(&self) -> usize {
        self.fo
    }

    /// Writes the `Fo` outputs at `(z, y, x)` into `out`. Taps that fall
    /// outside the volume are skipped, and masked taps never read `x` at all.
    #[inline]
    pub fn eval_at(&self, x: &[f64], vol: Volume, z: usize, y: usize, xx: usize, out: &mut [f64]) {
        out[..self.fo].copy_from_slice(&self.bias);
        let plane = vol.positions();
        for t in &self.taps {
            let (zz, yy, xs) = (z as isize + t.dz, y as isize + t.dy, xx as isize + t.dx);
            if zz < 0 || yy < 0 || xs < 0 || zz >= vol.d as isize || yy >= vol.h as isize || xs >= vol.w as isize {
                continue;
            }
            let idx = t.fi * plane + ((zz as usize * vol.h) + yy as usize) * vol.w + xs as usize;
            out[t.fo] += t.weight * x[idx];
        }
    }

    /// Full "same"-padded masked convolution of a volume.
    pub fn apply(&self, x: &[f64], vol: Volume) -> Result<Vec<f64>> {
        if vol.f != self.fi || x.len() != vol.f * vol.positions() {
            return Err(Error::shape("conv3d_masked", &[vol.f, vol.d, vol.h, vol.w], &[self.fo, self.fi]));
        }
        let plane = vol.positions();
        let mut out = vec![0.0; self.fo * plane];
        let mut buf = vec![0.0; self.fo];
        for z in 0..vol.d {
            for y in 0..vol.h {
                for xx in 0..vol.w {
                    self.eval_at(x, vol, z, y, xx, &mut buf);
                    let p = (z * vol.h + y) * vol.w + xx;
                    for (o, &v) in buf.iter().enumerate() {
                        out[o * plane + p] = v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates input and kernel gradients for upstream gradient `gout`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        vol: Volume,
        gout: &[f64],
        mut gx: Option<&mut [f64]>,
        mut gw: Option<&mut [f64]>,
        mut gb: Option<&mut [f64]>,
    ) {
        let plane = vol.positions();
        for z in 0..vol.d {
            for y in 0..vol.h {
                for xx in 0..vol.w {
                    let p = (z * vol.h + y) * vol.w + xx;
                    if let Some(gb) = gb.as_deref_mut() {
                        for (o, b) in gb.iter_mut().enumerate() {
                            *b += gout[o * plane + p];
                        }
                    }
                    for t in &self.taps {
                        let (zz, yy, xs) = (z as isize + t.dz, y as isize + t.dy, xx as isize + t.dx);
                        if zz < 0
                            || yy < 0
                            || xs < 0
                            || zz >= vol.d as isize
                            || yy >= vol.h as isize
                            || xs >= vol.w as isize
                        {
                            continue;
                        }
                        let g = gout[t.fo * plane + p];
                        let idx = t.fi * plane + ((zz as usize * vol.h) + yy as usize) * vol.w + xs as usize;
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[idx] += t.weight * g;
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[t.index] += g * x[idx];
                        }
                    }
                }
            }
        }
    }
}

/// Masked "same"-padded 3D cross-correlation of `x: [Fi,D,H,W]` with
/// `kernel ⊙ mask`, `kernel: [Fo,Fi,kd,kh,kw]`.
pub fn conv3d_masked(x: &Tensor, kernel: &Tensor, mask: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mk = MaskedKernel::new(kernel, mask, bias)?;
    let vol = Volume::from_shape(x.shape())?;
    let out = mk.apply(x.data(), vol)?;
    Tensor::new(&[mk.fo, vol.d, vol.h, vol.w], out)
}

/// Feature mixing `out[o, s] = b[o] + Σ_i w[o,i]·x[i,s]` (a 1×1 / 1×1×1
/// convolution) over `x: [Fi, ...]`.
pub fn pointwise(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.is_empty() || ws.len() != 2 || ws[1] != xs[0] {
        return Err(Error::shape("pointwise", xs, ws));
    }
    check_bias("pointwise", bias, ws[0])?;
    let (fo, fi) = (ws[0], ws[1]);
    let inner = x.len() / fi.max(1);
    let mut out = vec![0.0; fo * inner];
    for o in 0..fo {
        let row = &mut out[o * inner..(o + 1) * inner];
        if let Some(b) = bias {
            let bv = b.data()[o];
            for v in row.iter_mut() {
                *v = bv;
            }
        }
        for i in 0..fi {
            let wv = w.data()[o * fi + i];
            for (r, &xv) in row.iter_mut().zip(&x.data()[i * inner..(i + 1) * inner]) {
                *r += wv * xv;
            }
        }
    }
    let mut shape = xs.to_vec();
    shape[0] = fo;
    Tensor::new(&shape, out)
}
