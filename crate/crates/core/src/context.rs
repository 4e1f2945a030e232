//! Gated 3D context model with hyperprior conditioning.
//!
//! The quantized latent `ŷ: [M,H,W]` is viewed as a one-feature volume
//! `[1, D=M, H, W]` whose causal order is channel-major raster order. Each
//! layer runs three gated stacks, each on its own feature map:
//!
//! * the **channel** stack only ever sees earlier latent channels,
//! * the **vertical** stack sees earlier rows of the current channel (plus
//!   the channel stack),
//! * the **horizontal** stack sees earlier columns of the current row (plus
//!   the other two stacks at the same position).
//!
//! Every stack output is `tanh(W₁∗a + V₁∗h) ⊙ σ(W₂∗a + V₂∗h)` where `h` is
//! the hyper-decoder output at the same position. Because the vertical and
//! channel maps are only constrained along one axis, their receptive fields
//! grow in every other direction and the combined field has no blind spots.
//! The last layer's three maps are concatenated and fused by a 1×1×1
//! convolution into `(μ, σ)`.
//!
//! [`ContextModel::forward`] is the differentiable path used in training.
//! [`ContextEngine`] is the inference path; its parallel [`ContextEngine::predict`]
//! and the serial [`ContextDecoder`] share one per-position routine and agree
//! bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::kernels::{MaskedKernel, Volume};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{uniform, Constraint, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextConfig {
    /// Number of gated layers `L`.
    pub layers: usize,
    /// Gate width `k`: each masked convolution emits `k` channels, half
    /// through `tanh` and half through the sigmoid gate.
    pub gate_width: usize,
    /// Odd base kernel size `n`.
    pub kernel: usize,
    /// Hyperprior features per latent channel; `z_p` has
    /// `hyper_features · M` channels.
    pub hyper_features: usize,
    /// Residual connection on the horizontal stack for layers after the first.
    pub horizontal_residual: bool,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            layers: 3,
            gate_width: 12,
            kernel: 3,
            hyper_features: 2,
            horizontal_residual: true,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("context model needs at least one layer"));
        }
        if self.gate_width == 0 || self.gate_width % 2 != 0 {
            return Err(Error::invalid("gate width must be a positive even number"));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::invalid("context kernel size must be odd and >= 3"));
        }
        if self.hyper_features == 0 {
            return Err(Error::invalid("hyper_features must be positive"));
        }
        Ok(())
    }

    /// Features per stack after gating.
    pub fn features(&self) -> usize {
        self.gate_width / 2
    }

    /// Half-extent of the theoretical receptive field along every axis.
    pub fn reach(&self) -> usize {
        self.layers * (self.kernel / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stack {
    Channel,
    Vertical,
    Horizontal,
}

pub const STACKS: [Stack; 3] = [Stack::Channel, Stack::Vertical, Stack::Horizontal];

/// Type A masks (first layer) exclude the current position; type B masks
/// (later layers) read a map that is already causal and may include it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskType {
    A,
    B,
}

/// Whether offset `(dc, dh, dw)` is an active tap of `stack`.
///
/// Type A: channel `dc < 0`; vertical `dc = 0, dh < 0`; horizontal
/// `dc = dh = 0, dw < 0`. The three are disjoint and their union is exactly
/// the set of causal predecessors inside the window. Type B widens each stack
/// along the axes its own input map is unconstrained in: channel `dc ≤ 0`,
/// vertical `dc = 0, dh ≤ 0`, horizontal `dc = dh = 0, dw ≤ 0`.
pub fn tap_active(stack: Stack, kind: MaskType, dc: isize, dh: isize, dw: isize) -> bool {
    let b = kind == MaskType::B;
    match stack {
        Stack::Channel => dc < 0 || (b && dc == 0),
        Stack::Vertical => dc == 0 && (dh < 0 || (b && dh == 0)),
        Stack::Horizontal => dc == 0 && dh == 0 && (dw < 0 || (b && dw == 0)),
    }
}

/// The `[n,n,n]` mask of one stack, axes ordered `(Δc, Δh, Δw)`.
pub fn stack_mask(n: usize, stack: Stack, kind: MaskType) -> Result<Tensor> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::invalid(format!("mask size must be odd and >= 3, got {n}")));
    }
    let r = (n / 2) as isize;
    Ok(Tensor::from_fn(&[n, n, n], |i| {
        let dc = (i / (n * n)) as isize - r;
        let dh = ((i / n) % n) as isize - r;
        let dw = (i % n) as isize - r;
        if tap_active(stack, kind, dc, dh, dw) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Channel, vertical and horizontal masks for kernel size `n`.
pub fn build_masks(n: usize, kind: MaskType) -> Result<[Tensor; 3]> {
    Ok([
        stack_mask(n, Stack::Channel, kind)?,
        stack_mask(n, Stack::Vertical, kind)?,
        stack_mask(n, Stack::Horizontal, kind)?,
    ])
}

/// Broadcasts an `[n,n,n]` mask to a full `[Fo,Fi,n,n,n]` kernel shape.
pub fn full_mask(mask: &Tensor, fo: usize, fi: usize) -> Tensor {
    let m = mask.data();
    let shape = [fo, fi, mask.dim(0), mask.dim(1), mask.dim(2)];
    Tensor::from_fn(&shape, |i| m[i % m.len()])
}

/// Strict causal order over `(channel, row, col)`: `a` precedes `b`.
pub fn precedes(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    a < b
}

#[derive(Clone, Debug)]
struct StackParams {
    weight: ParamId,
    bias: ParamId,
    cond: ParamId,
}

#[derive(Clone, Debug)]
struct LayerParams {
    stacks: [StackParams; 3],
    channel_to_vertical: ParamId,
    vertical_to_horizontal: ParamId,
    channel_to_horizontal: ParamId,
    kind: MaskType,
}

/// Parameters of the gated context model.
#[derive(Clone, Debug)]
pub struct ContextModel {
    pub config: ContextConfig,
    layers: Vec<LayerParams>,
    fusion_weight: ParamId,
    fusion_bias: ParamId,
}

impl ContextModel {
    pub fn new(store: &mut ParamStore, name: &str, config: ContextConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (n, k, f, hf) = (config.kernel, config.gate_width, config.features(), config.hyper_features);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let fin = if l == 0 { 1 } else { f };
            let kind = if l == 0 { MaskType::A } else { MaskType::B };
            let mut make = |idx: usize| -> Result<StackParams> {
                let s = ["channel", "vertical", "horizontal"][idx];
                let mask = stack_mask(n, STACKS[idx], kind)?;
                let active = mask.sum().max(1.0);
                let bound = libm::sqrt(6.0 / (fin as f64 * active + k as f64));
                Ok(StackParams {
                    weight: store.add(format!("{name}.l{l}.{s}.weight"), uniform(&[k, fin, n, n, n], bound, rng), Group::Context, Constraint::None),
                    bias: store.add(format!("{name}.l{l}.{s}.bias"), Tensor::zeros(&[k]), Group::Context, Constraint::None),
                    cond: store.add(
                        format!("{name}.l{l}.{s}.cond"),
                        uniform(&[k, hf], libm::sqrt(6.0 / (hf + k) as f64), rng),
                        Group::Context,
                        Constraint::None,
                    ),
                })
            };
            let stacks = [make(0)?, make(1)?, make(2)?];
            let fb = libm::sqrt(6.0 / (f + k) as f64);
            layers.push(LayerParams {
                stacks,
                channel_to_vertical: store.add(format!("{name}.l{l}.c2v"), uniform(&[k, f], fb, rng), Group::Context, Constraint::None),
                vertical_to_horizontal: store.add(format!("{name}.l{l}.v2h"), uniform(&[k, f], fb, rng), Group::Context, Constraint::None),
                channel_to_horizontal: store.add(format!("{name}.l{l}.c2h"), uniform(&[k, f], fb, rng), Group::Context, Constraint::None),
                kind,
            });
        }
        let fusion_weight = store.add(
            format!("{name}.fusion.weight"),
            uniform(&[2, 3 * f], libm::sqrt(6.0 / (3 * f + 2) as f64), rng),
            Group::Context,
            Constraint::None,
        );
        // σ starts near 1: softplus(softplus⁻¹(1)) = 1
        let fusion_bias = store.add(
            format!("{name}.fusion.bias"),
            Tensor::new(&[2], vec![0.0, math::softplus_inv(1.0)])?,
            Group::Context,
            Constraint::None,
        );
        Ok(ContextModel {
            config,
            layers,
            fusion_weight,
            fusion_bias,
        })
    }

    /// Every parameter id owned by the model.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            for s in &l.stacks {
                ids.extend([s.weight, s.bias, s.cond]);
            }
            ids.extend([l.channel_to_vertical, l.vertical_to_horizontal, l.channel_to_horizontal]);
        }
        ids.extend([self.fusion_weight, self.fusion_bias]);
        ids
    }

    fn check_inputs(&self, y: &[usize], zp: &[usize]) -> Result<()> {
        if y.len() != 3 || zp.len() != 3 || zp[0] != self.config.hyper_features * y[0] || zp[1..] != y[1..] {
            return Err(Error::shape("context model", y, zp));
        }
        Ok(())
    }

    /// Differentiable `(μ, σ) = P(ŷ, z_p)` with `ŷ: [M,H,W]` and
    /// `z_p: [hyper_features·M, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y: Var, zp: Var) -> Result<(Var, Var)> {
        self.check_inputs(g.shape(y), g.shape(zp))?;
        let (m, h, w) = (g.shape(y)[0], g.shape(y)[1], g.shape(y)[2]);
        let (n, f, hf) = (self.config.kernel, self.config.features(), self.config.hyper_features);
        let a0 = g.reshape(y, &[1, m, h, w])?;
        let hv = g.reshape(zp, &[hf, m, h, w])?;

        let gate = |g: &mut Graph, pre: Var| -> Result<Var> {
            let t = g.slice0(pre, 0, f)?;
            let s = g.slice0(pre, f, f)?;
            let t = g.tanh(t);
            let s = g.sigmoid(s);
            g.mul(t, s)
        };

        let (mut cmap, mut vmap, mut hmap) = (a0, a0, a0);
        for (l, lp) in self.layers.iter().enumerate() {
            let fin = if l == 0 { 1 } else { f };
            let stack_pre = |g: &mut Graph, idx: usize, input: Var| -> Result<Var> {
                let sp = &lp.stacks[idx];
                let mask = full_mask(&stack_mask(n, STACKS[idx], lp.kind)?, self.config.gate_width, fin);
                let wv = g.param(store, sp.weight);
                let bv = g.param(store, sp.bias);
                let cv = g.param(store, sp.cond);
                let conv = g.conv3d_masked(input, wv, &mask, Some(bv))?;
                let cond = g.pointwise(hv, cv, None)?;
                g.add(conv, cond)
            };

            let pre_c = stack_pre(g, 0, cmap)?;
            let c_new = gate(g, pre_c)?;

            let pre_v = stack_pre(g, 1, vmap)?;
            let fcv = g.param(store, lp.channel_to_vertical);
            let feed = g.pointwise(c_new, fcv, None)?;
            let pre_v = g.add(pre_v, feed)?;
            let v_new = gate(g, pre_v)?;

            let pre_h = stack_pre(g, 2, hmap)?;
            let fvh = g.param(store, lp.vertical_to_horizontal);
            let feed = g.pointwise(v_new, fvh, None)?;
            let pre_h = g.add(pre_h, feed)?;
            let fch = g.param(store, lp.channel_to_horizontal);
            let feed = g.pointwise(c_new, fch, None)?;
            let pre_h = g.add(pre_h, feed)?;
            let mut h_new = gate(g, pre_h)?;
            if l > 0 && self.config.horizontal_residual {
                h_new = g.add(h_new, hmap)?;
            }
            cmap = c_new;
            vmap = v_new;
            hmap = h_new;
        }
        let cat = g.concat0(&[cmap, vmap, hmap])?;
        let fw = g.param(store, self.fusion_weight);
        let fb = g.param(store, self.fusion_bias);
        let out = g.pointwise(cat, fw, Some(fb))?;
        let mu = g.slice0(out, 0, 1)?;
        let mu = g.reshape(mu, &[m, h, w])?;
        let raw = g.slice0(out, 1, 1)?;
        let raw = g.reshape(raw, &[m, h, w])?;
        let sigma = g.softplus(raw);
        Ok((mu, sigma))
    }

    /// Compiles the current parameters into an inference engine.
    pub fn engine(&self, store: &ParamStore) -> Result<ContextEngine> {
        let (n, k, f) = (self.config.kernel, self.config.gate_width, self.config.features());
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, lp) in self.layers.iter().enumerate() {
            let fin = if l == 0 { 1 } else { f };
            let mut convs = Vec::with_capacity(3);
            let mut conds = Vec::with_capacity(3);
            for (idx, sp) in lp.stacks.iter().enumerate() {
                let mask = full_mask(&stack_mask(n, STACKS[idx], lp.kind)?, k, fin);
                convs.push(MaskedKernel::new(store.get(sp.weight), &mask, Some(store.get(sp.bias)))?);
                conds.push(store.get(sp.cond).data().to_vec());
            }
            let mut convs = convs.into_iter();
            let mut conds = conds.into_iter();
            layers.push(EngineLayer {
                conv: [convs.next().unwrap(), convs.next().unwrap(), convs.next().unwrap()],
                cond: [conds.next().unwrap(), conds.next().unwrap(), conds.next().unwrap()],
                c2v: store.get(lp.channel_to_vertical).data().to_vec(),
                v2h: store.get(lp.vertical_to_horizontal).data().to_vec(),
                c2h: store.get(lp.channel_to_horizontal).data().to_vec(),
            });
        }
        Ok(ContextEngine {
            config: self.config,
            layers,
            fusion_weight: store.get(self.fusion_weight).data().to_vec(),
            fusion_bias: store.get(self.fusion_bias).data().to_vec(),
        })
    }
}

struct EngineLayer {
    conv: [MaskedKernel; 3],
    cond: [Vec<f64>; 3],
    c2v: Vec<f64>,
    v2h: Vec<f64>,
    c2h: Vec<f64>,
}

/// Tape-free context model used by the encoder and decoder.
pub struct ContextEngine {
    config: ContextConfig,
    layers: Vec<EngineLayer>,
    fusion_weight: Vec<f64>,
    fusion_bias: Vec<f64>,
}

/// Per-latent working state: the three maps of every layer.
struct Maps {
    vol: Volume,
    hyper: Vec<f64>,
    y: Vec<f64>,
    c: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

impl ContextEngine {
    pub fn config(&self) -> &ContextConfig {
        &self.config
    }

    fn new_maps(&self, y: &Tensor, zp: &Tensor) -> Result<Maps> {
        let ys = y.shape();
        let zs = zp.shape();
        if ys.len() != 3 || zs.len() != 3 || zs[0] != self.config.hyper_features * ys[0] || zs[1..] != ys[1..] {
            return Err(Error::shape("context engine", ys, zs));
        }
        let vol = Volume {
            f: 1,
            d: ys[0],
            h: ys[1],
            w: ys[2],
        };
        let size = self.config.features() * vol.positions();
        let l = self.layers.len();
        Ok(Maps {
            vol,
            hyper: zp.data().to_vec(),
            y: y.data().to_vec(),
            c: vec![vec![0.0; size]; l],
            v: vec![vec![0.0; size]; l],
            h: vec![vec![0.0; size]; l],
        })
    }

    /// Gated pre-activation of one stack at one position (before feeds).
    #[inline]
    fn stack_pre(&self, layer: usize, stack: usize, input: &[f64], maps: &Maps, z: usize, yy: usize, x: usize, pre: &mut [f64]) {
        let el = &self.layers[layer];
        let fin = if layer == 0 { 1 } else { self.config.features() };
        let vol = Volume { f: fin, ..maps.vol };
        el.conv[stack].eval_at(input, vol, z, yy, x, pre);
        let hf = self.config.hyper_features;
        let plane = maps.vol.positions();
        let p = (z * maps.vol.h + yy) * maps.vol.w + x;
        let cond = &el.cond[stack];
        for (o, v) in pre.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..hf {
                acc += cond[o * hf + j] * maps.hyper[j * plane + p];
            }
            *v += acc;
        }
    }

    #[inline]
    fn add_feed(weight: &[f64], src: &[f64], f: usize, plane: usize, p: usize, pre: &mut [f64]) {
        for (o, v) in pre.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..f {
                acc += weight[o * f + j] * src[j * plane + p];
            }
            *v += acc;
        }
    }

    #[inline]
    fn gate_into(pre: &[f64], f: usize, dst: &mut [f64], plane: usize, p: usize) {
        for j in 0..f {
            dst[j * plane + p] = math::tanh(pre[j]) * math::sigmoid(pre[f + j]);
        }
    }

    fn channel_at(&self, maps: &mut Maps, l: usize, z: usize, yy: usize, x: usize, pre: &mut [f64]) {
        let (f, plane) = (self.config.features(), maps.vol.positions());
        let p = (z * maps.vol.h + yy) * maps.vol.w + x;
        let input = if l == 0 { core::mem::take(&mut maps.y) } else { core::mem::take(&mut maps.c[l - 1]) };
        self.stack_pre(l, 0, &input, maps, z, yy, x, pre);
        if l == 0 {
            maps.y = input;
        } else {
            maps.c[l - 1] = input;
        }
        Self::gate_into(pre, f, &mut maps.c[l], plane, p);
    }

    fn vertical_at(&self, maps: &mut Maps, l: usize, z: usize, yy: usize, x: usize, pre: &mut [f64]) {
        let (f, plane) = (self.config.features(), maps.vol.positions());
        let p = (z * maps.vol.h + yy) * maps.vol.w + x;
        let input = if l == 0 { core::mem::take(&mut maps.y) } else { core::mem::take(&mut maps.v[l - 1]) };
        self.stack_pre(l, 1, &input, maps, z, yy, x, pre);
        if l == 0 {
            maps.y = input;
        } else {
            maps.v[l - 1] = input;
        }
        Self::add_feed(&self.layers[l].c2v, &maps.c[l], f, plane, p, pre);
        Self::gate_into(pre, f, &mut maps.v[l], plane, p);
    }

    fn horizontal_at(&self, maps: &mut Maps, l: usize, z: usize, yy: usize, x: usize, pre: &mut [f64]) {
        let (f, plane) = (self.config.features(), maps.vol.positions());
        let p = (z * maps.vol.h + yy) * maps.vol.w + x;
        let input = if l == 0 { core::mem::take(&mut maps.y) } else { core::mem::take(&mut maps.h[l - 1]) };
        self.stack_pre(l, 2, &input, maps, z, yy, x, pre);
        Self::add_feed(&self.layers[l].v2h, &maps.v[l], f, plane, p, pre);
        Self::add_feed(&self.layers[l].c2h, &maps.c[l], f, plane, p, pre);
        Self::gate_into(pre, f, &mut maps.h[l], plane, p);
        if l > 0 && self.config.horizontal_residual {
            for j in 0..f {
                maps.h[l][j * plane + p] += input[j * plane + p];
            }
        }
        if l == 0 {
            maps.y = input;
        } else {
            maps.h[l - 1] = input;
        }
    }

    fn fuse_at(&self, maps: &Maps, p: usize) -> (f64, f64) {
        let (f, plane) = (self.config.features(), maps.vol.positions());
        let last = self.layers.len() - 1;
        let mut out = [0.0f64; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = self.fusion_bias[k];
            let row = &self.fusion_weight[k * 3 * f..(k + 1) * 3 * f];
            for (s, map) in [&maps.c[last], &maps.v[last], &maps.h[last]].into_iter().enumerate() {
                for j in 0..f {
                    acc += row[s * f + j] * map[j * plane + p];
                }
            }
            *o = acc;
        }
        (out[0], math::softplus(out[1]))
    }

    /// `(μ, σ)` for every position of `ŷ`, computed layer by layer.
    pub fn predict(&self, y: &Tensor, zp: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut maps = self.new_maps(y, zp)?;
        let vol = maps.vol;
        let mut pre = vec![0.0; self.config.gate_width];
        for l in 0..self.layers.len() {
            for z in 0..vol.d {
                for yy in 0..vol.h {
                    for x in 0..vol.w {
                        self.channel_at(&mut maps, l, z, yy, x, &mut pre);
                    }
                }
            }
            for z in 0..vol.d {
                for yy in 0..vol.h {
                    for x in 0..vol.w {
                        self.vertical_at(&mut maps, l, z, yy, x, &mut pre);
                    }
                }
            }
            for z in 0..vol.d {
                for yy in 0..vol.h {
                    for x in 0..vol.w {
                        self.horizontal_at(&mut maps, l, z, yy, x, &mut pre);
                    }
                }
            }
        }
        let n = vol.positions();
        let mut mu = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        for p in 0..n {
            let (m, s) = self.fuse_at(&maps, p);
            mu.push(m);
            sigma.push(s);
        }
        Ok((Tensor::new(y.shape(), mu)?, Tensor::new(y.shape(), sigma)?))
    }

    /// Starts serial decoding of a latent of shape `[M,H,W]`.
    pub fn decoder(&self, shape: &[usize], zp: &Tensor) -> Result<ContextDecoder<'_>> {
        let y = Tensor::zeros(shape);
        ContextDecoder::new(self, &y, zp)
    }
}

/// Serial counterpart of [`ContextEngine::predict`]. Positions are visited
/// strictly in causal order; each step needs every earlier symbol.
pub struct ContextDecoder<'a> {
    engine: &'a ContextEngine,
    maps: Maps,
    pre: Vec<f64>,
    next: usize,
    pending: bool,
}

impl<'a> ContextDecoder<'a> {
    /// Decoder over a prefix tensor. Entries at or after the current
    /// position are never read.
    pub fn new(engine: &'a ContextEngine, prefix: &Tensor, zp: &Tensor) -> Result<Self> {
        let maps = engine.new_maps(prefix, zp)?;
        Ok(ContextDecoder {
            engine,
            maps,
            pre: vec![0.0; engine.config.gate_width],
            next: 0,
            pending: false,
        })
    }

    pub fn position(&self) -> usize {
        self.next
    }

    pub fn len(&self) -> usize {
        self.maps.vol.positions()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(μ, σ)` at linear position `p`, which must be the next undecoded one.
    pub fn step(&mut self, p: usize) -> Result<(f64, f64)> {
        if p != self.next || self.pending || p >= self.len() {
            return Err(Error::OutOfOrder {
                expected: self.next,
                got: p,
            });
        }
        let vol = self.maps.vol;
        let (z, yy, x) = (p / (vol.h * vol.w), (p / vol.w) % vol.h, p % vol.w);
        let e = self.engine;
        let layers = e.layers.len();
        if yy == 0 && x == 0 {
            // channel maps of this depth only need earlier depths
            for l in 0..layers {
                for r in 0..vol.h {
                    for c in 0..vol.w {
                        e.channel_at(&mut self.maps, l, z, r, c, &mut self.pre);
                    }
                }
            }
        }
        if x == 0 {
            for l in 0..layers {
                for c in 0..vol.w {
                    e.vertical_at(&mut self.maps, l, z, yy, c, &mut self.pre);
                }
            }
        }
        for l in 0..layers {
            e.horizontal_at(&mut self.maps, l, z, yy, x, &mut self.pre);
        }
        self.pending = true;
        Ok(e.fuse_at(&self.maps, p))
    }

    /// Records the decoded symbol at the current position and advances.
    pub fn push(&mut self, value: f64) -> Result<()> {
        if !self.pending {
            return Err(Error::OutOfOrder {
                expected: self.next,
                got: self.next + 1,
            });
        }
        self.maps.y[self.next] = value;
        self.next += 1;
        self.pending = false;
        Ok(())
    }

    /// Advances keeping the value already in the prefix buffer.
    pub fn advance(&mut self) -> Result<()> {
        let v = self.maps.y[self.next];
        self.push(v)
    }

    /// The latent decoded so far (later entries hold the fill value).
    pub fn latent(&self) -> Result<Tensor> {
        let v = self.maps.vol;
        Tensor::new(&[v.d, v.h, v.w], self.maps.y.clone())
    }
}

/// `(μ_p, σ_p)` from a partially decoded latent: replays the serial decoder
/// over `prefix` up to position `p`.
pub fn decode_step(engine: &ContextEngine, prefix: &Tensor, zp: &Tensor, p: usize) -> Result<(f64, f64)> {
    let mut dec = ContextDecoder::new(engine, prefix, zp)?;
    for q in 0..p {
        dec.step(q)?;
        dec.advance()?;
    }
    dec.step(p)
}

/// Anything mapping `(ŷ, z_p)` to per-position `(μ, σ)`.
pub trait CausalPredictor {
    fn predict(&self, y: &Tensor, zp: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl CausalPredictor for ContextEngine {
    fn predict(&self, y: &Tensor, zp: &Tensor) -> Result<(Tensor, Tensor)> {
        ContextEngine::predict(self, y, zp)
    }
}

/// Sensitivity matrix `s[p][q] = |Δμ_p| + |Δσ_p|` after adding `delta` to
/// `ŷ_q`, measured by exact re-evaluation.
pub fn sensitivity(model: &impl CausalPredictor, y: &Tensor, zp: &Tensor, delta: f64) -> Result<Vec<Vec<f64>>> {
    let (mu0, s0) = model.predict(y, zp)?;
    let n = y.len();
    let mut out = vec![vec![0.0; n]; n];
    for q in 0..n {
        let mut yq = y.clone();
        yq.data_mut()[q] += delta;
        let (mu, s) = model.predict(&yq, zp)?;
        for (p, row) in out.iter_mut().enumerate() {
            row[q] = (mu.data()[p] - mu0.data()[p]).abs() + (s.data()[p] - s0.data()[p]).abs();
        }
    }
    Ok(out)
}

/// Dense bit set over latent positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionSet {
    words: Vec<u64>,
}

impl PositionSet {
    fn new(n: usize) -> Self {
        PositionSet {
            words: vec![0; n.div_ceil(64)],
        }
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn union_with(&mut self, other: &PositionSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// For every output position, the set of latent positions it structurally
/// depends on through the masks and stack wiring of `config`, on a latent of
/// `dims = (D, H, W)`.
pub fn structural_coverage(config: &ContextConfig, dims: (usize, usize, usize)) -> Result<Vec<PositionSet>> {
    config.validate()?;
    let (d, h, w) = dims;
    let n = d * h * w;
    let r = (config.kernel / 2) as isize;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let gather = |src: &[PositionSet], stack: Stack, kind: MaskType, z: usize, y: usize, x: usize, dst: &mut PositionSet| {
        for dc in -r..=r {
            for dh in -r..=r {
                for dw in -r..=r {
                    if !tap_active(stack, kind, dc, dh, dw) {
                        continue;
                    }
                    let (zz, yy, xx) = (z as isize + dc, y as isize + dh, x as isize + dw);
                    if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    dst.union_with(&src[idx(zz as usize, yy as usize, xx as usize)]);
                }
            }
        }
    };
    let mut base = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = PositionSet::new(n);
        s.insert(i);
        base.push(s);
    }
    let (mut cm, mut vm, mut hm) = (base.clone(), base.clone(), base);
    for l in 0..config.layers {
        let kind = if l == 0 { MaskType::A } else { MaskType::B };
        let mut c2 = vec![PositionSet::new(n); n];
        let mut v2 = vec![PositionSet::new(n); n];
        let mut h2 = vec![PositionSet::new(n); n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = idx(z, y, x);
                    gather(&cm, Stack::Channel, kind, z, y, x, &mut c2[p]);
                }
            }
        }
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = idx(z, y, x);
                    gather(&vm, Stack::Vertical, kind, z, y, x, &mut v2[p]);
                    let c = c2[p].clone();
                    v2[p].union_with(&c);
                }
            }
        }
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = idx(z, y, x);
                    gather(&hm, Stack::Horizontal, kind, z, y, x, &mut h2[p]);
                    let (c, v) = (c2[p].clone(), v2[p].clone());
                    h2[p].union_with(&c);
                    h2[p].union_with(&v);
                    if l > 0 && config.horizontal_residual {
                        let prev = hm[p].clone();
                        h2[p].union_with(&prev);
                    }
                }
            }
        }
        cm = c2;
        vm = v2;
        hm = h2;
    }
    let mut out = hm;
    for p in 0..n {
        out[p].union_with(&cm[p]);
        out[p].union_with(&vm[p]);
    }
    Ok(out)
}

/// A depth-matched stack of gated 2D masked convolutions applied to each
/// latent channel independently: the classic single-map masked design,
/// which leaves blind spots above and to the right of the current position.
pub struct NaiveMaskedStack {
    config: ContextConfig,
    convs: Vec<MaskedKernel>,
    fusion: Vec<f64>,
}

fn naive_mask(n: usize, kind: MaskType) -> Tensor {
    let r = (n / 2) as isize;
    Tensor::from_fn(&[n, n, n], |i| {
        let dc = (i / (n * n)) as isize - r;
        let dh = ((i / n) % n) as isize - r;
        let dw = (i % n) as isize - r;
        let on = dc == 0 && (dh < 0 || (dh == 0 && (dw < 0 || (kind == MaskType::B && dw == 0))));
        if on {
            1.0
        } else {
            0.0
        }
    })
}

impl NaiveMaskedStack {
    pub fn new(config: ContextConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (n, k, f) = (config.kernel, config.gate_width, config.features());
        let mut convs = Vec::new();
        for l in 0..config.layers {
            let fin = if l == 0 { 1 } else { f };
            let kind = if l == 0 { MaskType::A } else { MaskType::B };
            let w = uniform(&[k, fin, n, n, n], 0.8, rng);
            let b = uniform(&[k], 0.1, rng);
            convs.push(MaskedKernel::new(&w, &full_mask(&naive_mask(n, kind), k, fin), Some(&b))?);
        }
        let fusion = uniform(&[2, f], 0.8, rng).into_data();
        Ok(NaiveMaskedStack { config, convs, fusion })
    }

    /// The structural tap pattern of one layer.
    pub fn mask(n: usize, kind: MaskType) -> Tensor {
        naive_mask(n, kind)
    }
}

impl CausalPredictor for NaiveMaskedStack {
    fn predict(&self, y: &Tensor, _zp: &Tensor) -> Result<(Tensor, Tensor)> {
        if y.rank() != 3 {
            return Err(Error::shape("naive stack", y.shape(), &[0, 0, 0]));
        }
        let f = self.config.features();
        let mut vol = Volume {
            f: 1,
            d: y.dim(0),
            h: y.dim(1),
            w: y.dim(2),
        };
        let plane = vol.positions();
        let mut a = y.data().to_vec();
        for conv in &self.convs {
            let pre = conv.apply(&a, vol)?;
            let mut next = vec![0.0; f * plane];
            for j in 0..f {
                for p in 0..plane {
                    next[j * plane + p] = math::tanh(pre[j * plane + p]) * math::sigmoid(pre[(f + j) * plane + p]);
                }
            }
            a = next;
            vol.f = f;
        }
        let mut mu = vec![0.0; plane];
        let mut sigma = vec![0.0; plane];
        for p in 0..plane {
            let (mut m, mut s) = (0.0, 0.0);
            for j in 0..f {
                m += self.fusion[j] * a[j * plane + p];
                s += self.fusion[f + j] * a[j * plane + p];
            }
            mu[p] = m;
            sigma[p] = math::softplus(s);
        }
        Ok((Tensor::new(y.shape(), mu)?, Tensor::new(y.shape(), sigma)?))
    }
}
