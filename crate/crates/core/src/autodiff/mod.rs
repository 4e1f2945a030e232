//! Reverse-mode automatic differentiation over a plain tape.
//!
//! A [`Graph`] records every primitive as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse. Nodes that do not depend on a gradient-requiring leaf are never
//! differentiated.

pub mod check;
pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, PadSpec, Tensor};
use kernels::{Conv2dGeom, MaskedKernel, Volume};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    ClampMin(Var, f64),
    NormalCdf(Var),
    Prelu(Var, Var),
    Concat0(Vec<Var>),
    Slice0(Var, usize),
    Reshape(Var),
    Pad2d(Var, PadSpec),
    Crop2d(Var, PadSpec),
    Sum(Var),
    Mean(Var),
    BroadcastTo(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: PadSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        crop: PadSpec,
    },
    Conv3dMasked {
        x: Var,
        w: Var,
        b: Option<Var>,
        mask: Tensor,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: Vec<Option<Var>>,
    frozen: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are bound as constants, for inference.
    pub fn inference() -> Self {
        Graph {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter from `store` as a gradient leaf. Binding the same
    /// id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = if self.frozen {
            self.constant(store.get(id).clone())
        } else {
            self.variable(store.get(id).clone())
        };
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter, zero-filled when unreached.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .map(|(i, v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (ParamId::from_index(i), g)
            })
            .collect()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, math::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, math::log, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, math::sqrt, Op::Sqrt(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| math::pow(x, p), Op::Powf(a, p))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, math::softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `max(a, lo)`; the gradient is zero where the bound is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| if x < lo { lo } else { x }, Op::ClampMin(a, lo))
    }

    /// Standard normal CDF.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.unary(a, math::normal_cdf, Op::NormalCdf(a))
    }

    /// `x` where positive, `alpha[c]·x` otherwise, with `alpha: [C]` indexed
    /// by axis 0 of `x`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (xv, av) = (self.value(x), self.value(alpha));
        if xv.rank() == 0 || av.shape() != [xv.dim(0)] {
            return Err(Error::shape("prelu", xv.shape(), av.shape()));
        }
        let inner = xv.len() / xv.dim(0).max(1);
        let mut out = xv.clone();
        for (c, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let a = av.data()[c];
            for v in chunk {
                if *v <= 0.0 {
                    *v *= a;
                }
            }
        }
        let ng = self.ng(&[x, alpha]);
        Ok(self.push(out, Op::Prelu(x, alpha), ng))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat0(&refs)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::Concat0(parts.to_vec()), ng))
    }

    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice0(start, len)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Slice0(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Zero padding on the two trailing axes of a `[C,H,W]` tensor.
    pub fn pad2d(&mut self, a: Var, pad: PadSpec) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 3 {
            return Err(Error::shape("pad2d", v.shape(), &[0, 0, 0]));
        }
        let (c, h, w) = (v.dim(0), v.dim(1), v.dim(2));
        let (ho, wo) = (h + pad.vertical(), w + pad.horizontal());
        let mut out = Tensor::zeros(&[c, ho, wo]);
        for ci in 0..c {
            for y in 0..h {
                let src = &v.data()[(ci * h + y) * w..(ci * h + y + 1) * w];
                let off = (ci * ho + y + pad.top) * wo + pad.left;
                out.data_mut()[off..off + w].copy_from_slice(src);
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Pad2d(a, pad), ng))
    }

    /// Removes `crop` rows/columns from the two trailing axes.
    pub fn crop2d(&mut self, a: Var, crop: PadSpec) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 3 || crop.vertical() >= v.dim(1) || crop.horizontal() >= v.dim(2) {
            return Err(Error::shape("crop2d", v.shape(), &[crop.vertical(), crop.horizontal()]));
        }
        let (c, h, w) = (v.dim(0), v.dim(1), v.dim(2));
        let (ho, wo) = (h - crop.vertical(), w - crop.horizontal());
        let mut out = Tensor::zeros(&[c, ho, wo]);
        for ci in 0..c {
            for y in 0..ho {
                let off = (ci * h + y + crop.top) * w + crop.left;
                out.data_mut()[(ci * ho + y) * wo..(ci * ho + y + 1) * wo].copy_from_slice(&v.data()[off..off + wo]);
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Crop2d(a, crop), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Broadcasts `a` to `shape`; every axis of `a` must match or be 1.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != shape.len() || v.shape().iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::shape("broadcast_to", v.shape(), shape));
        }
        let map = BroadcastMap::new(v.shape(), shape);
        let data = (0..numel(shape)).map(|i| v.data()[map.source(i)]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::BroadcastTo(a), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: PadSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, crop: PadSpec) -> Result<Var> {
        let out = kernels::conv2d_transpose(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, crop)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, crop }, ng))
    }

    pub fn conv3d_masked(&mut self, x: Var, w: Var, mask: &Tensor, b: Option<Var>) -> Result<Var> {
        let out = kernels::conv3d_masked(self.value(x), self.value(w), mask, b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            out,
            Op::Conv3dMasked {
                x,
                w,
                b,
                mask: mask.clone(),
            },
            ng,
        ))
    }

    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::pointwise(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(out, Op::Pointwise { x, w, b }, ng))
    }

    /// Batched matrix product `[B,M,K] × [B,K,N] → [B,M,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bn * m * n];
        for bi in 0..bn {
            for i in 0..m {
                let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
                for kk in 0..k {
                    let av_ = av.data()[(bi * m + i) * k + kk];
                    let brow = &bv.data()[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                    for (o, &bb) in orow.iter_mut().zip(brow) {
                        *o += av_ * bb;
                    }
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[bn, m, n], out)?, Op::Bmm(a, b), ng))
    }

    /// Back-propagates from the scalar `loss`. Node values are untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let shape = lv.shape().to_vec();
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, target: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let node = &self.nodes[target.0];
        let slot = &mut self.grads[target.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(t.data_mut(), &node.value);
    }

    fn elementwise(&mut self, target: Var, g: &Tensor, out: &Tensor, d: impl Fn(f64, f64) -> f64) {
        // d(input, output) is the local derivative
        self.send(target, |acc, input| {
            for ((a, &gi), (&x, &y)) in acc.iter_mut().zip(g.data()).zip(input.data().iter().zip(out.data())) {
                *a += gi * d(x, y);
            }
        });
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        let out = self.nodes[i].value.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(a, |acc, _| add_into(acc, g.data()));
                self.send(b, |acc, _| add_into(acc, g.data()));
            }
            Op::Sub(a, b) => {
                self.send(a, |acc, _| add_into(acc, g.data()));
                self.send(b, |acc, _| {
                    for (a, &gi) in acc.iter_mut().zip(g.data()) {
                        *a -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bv = self.value(b).clone();
                let av = self.value(a).clone();
                self.send(a, |acc, _| {
                    for ((a, &gi), &y) in acc.iter_mut().zip(g.data()).zip(bv.data()) {
                        *a += gi * y;
                    }
                });
                self.send(b, |acc, _| {
                    for ((a, &gi), &x) in acc.iter_mut().zip(g.data()).zip(av.data()) {
                        *a += gi * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(b).clone();
                self.send(a, |acc, _| {
                    for ((a, &gi), &y) in acc.iter_mut().zip(g.data()).zip(bv.data()) {
                        *a += gi / y;
                    }
                });
                self.send(b, |acc, _| {
                    for ((a, &gi), (&y, &q)) in acc.iter_mut().zip(g.data()).zip(bv.data().iter().zip(out.data())) {
                        *a -= gi * q / y;
                    }
                });
            }
            Op::Scale(a, c) => self.send(a, |acc, _| {
                for (a, &gi) in acc.iter_mut().zip(g.data()) {
                    *a += c * gi;
                }
            }),
            Op::Offset(a) => self.send(a, |acc, _| add_into(acc, g.data())),
            Op::Tanh(a) => self.elementwise(a, g, &out, |_, y| 1.0 - y * y),
            Op::Sigmoid(a) => self.elementwise(a, g, &out, |_, y| y * (1.0 - y)),
            Op::Exp(a) => self.elementwise(a, g, &out, |_, y| y),
            Op::Log(a) => self.elementwise(a, g, &out, |x, _| 1.0 / x),
            Op::Sqrt(a) => self.elementwise(a, g, &out, |_, y| 0.5 / y),
            Op::Powf(a, p) => self.elementwise(a, g, &out, |x, _| p * math::pow(x, p - 1.0)),
            Op::Softplus(a) => self.elementwise(a, g, &out, |x, _| math::sigmoid(x)),
            Op::Relu(a) => self.elementwise(a, g, &out, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Abs(a) => self.elementwise(a, g, &out, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::ClampMin(a, lo) => self.elementwise(a, g, &out, |x, _| if x < lo { 0.0 } else { 1.0 }),
            Op::NormalCdf(a) => self.elementwise(a, g, &out, |x, _| math::normal_pdf(x)),
            Op::Prelu(x, alpha) => {
                let xv = self.value(x).clone();
                let av = self.value(alpha).clone();
                let inner = (xv.len() / xv.dim(0).max(1)).max(1);
                self.send(x, |acc, _| {
                    for (j, (a, &gi)) in acc.iter_mut().zip(g.data()).enumerate() {
                        *a += if xv.data()[j] > 0.0 { gi } else { gi * av.data()[j / inner] };
                    }
                });
                self.send(alpha, |acc, _| {
                    for (j, &gi) in g.data().iter().enumerate() {
                        let xj = xv.data()[j];
                        if xj <= 0.0 {
                            acc[j / inner] += gi * xj;
                        }
                    }
                });
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).len();
                    self.send(p, |acc, _| add_into(acc, &g.data()[off..off + n]));
                    off += n;
                }
            }
            Op::Slice0(a, start) => {
                let inner: usize = out.shape()[1..].iter().product();
                let off = start * inner;
                self.send(a, |acc, _| add_into(&mut acc[off..off + g.len()], g.data()));
            }
            Op::Reshape(a) => self.send(a, |acc, _| add_into(acc, g.data())),
            Op::Pad2d(a, pad) => {
                let (c, ho, wo) = (out.dim(0), out.dim(1), out.dim(2));
                let (h, w) = (ho - pad.vertical(), wo - pad.horizontal());
                self.send(a, |acc, _| {
                    for ci in 0..c {
                        for y in 0..h {
                            let off = (ci * ho + y + pad.top) * wo + pad.left;
                            add_into(&mut acc[(ci * h + y) * w..(ci * h + y + 1) * w], &g.data()[off..off + w]);
                        }
                    }
                });
            }
            Op::Crop2d(a, crop) => {
                let (c, ho, wo) = (out.dim(0), out.dim(1), out.dim(2));
                let (h, w) = (ho + crop.vertical(), wo + crop.horizontal());
                self.send(a, |acc, _| {
                    for ci in 0..c {
                        for y in 0..ho {
                            let off = (ci * h + y + crop.top) * w + crop.left;
                            add_into(&mut acc[off..off + wo], &g.data()[(ci * ho + y) * wo..(ci * ho + y + 1) * wo]);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                self.send(a, |acc, _| acc.iter_mut().for_each(|v| *v += gs));
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                let gs = g.data()[0] / n;
                self.send(a, |acc, _| acc.iter_mut().for_each(|v| *v += gs));
            }
            Op::BroadcastTo(a) => {
                let src_shape = self.shape(a).to_vec();
                let map = BroadcastMap::new(&src_shape, out.shape());
                self.send(a, |acc, _| {
                    for (j, &gi) in g.data().iter().enumerate() {
                        acc[map.source(j)] += gi;
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
                let geom = Conv2dGeom::new(xv.shape(), wv.shape(), stride, pad).expect("validated in forward");
                self.send(x, |acc, _| kernels::conv2d_input_grad_acc(&geom, g.data(), wv.data(), acc));
                self.send(w, |acc, _| kernels::conv2d_weight_grad_acc(&geom, xv.data(), g.data(), acc));
                if let Some(b) = b {
                    self.send(b, |acc, _| channel_sums(acc, g.data()));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, crop } => {
                let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
                let geom = kernels::transpose_geom(xv.shape(), wv.shape(), stride, crop).expect("validated in forward");
                // transpose(x) = conv_adjoint(x): its own adjoint is the forward conv
                self.send(x, |acc, _| kernels::conv2d_acc(&geom, g.data(), wv.data(), acc));
                self.send(w, |acc, _| kernels::conv2d_weight_grad_acc(&geom, g.data(), xv.data(), acc));
                if let Some(b) = b {
                    self.send(b, |acc, _| channel_sums(acc, g.data()));
                }
            }
            Op::Conv3dMasked { x, w, b, mask } => {
                let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
                let bv = b.map(|b| self.value(b).clone());
                let mk = MaskedKernel::new(&wv, &mask, bv.as_ref()).expect("validated in forward");
                let vol = Volume::from_shape(xv.shape()).expect("validated in forward");
                let want = (self.nodes[x.0].needs_grad, self.nodes[w.0].needs_grad, b.map(|b| self.nodes[b.0].needs_grad).unwrap_or(false));
                let mut gx = want.0.then(|| vec![0.0; xv.len()]);
                let mut gw = want.1.then(|| vec![0.0; wv.len()]);
                let mut gb = want.2.then(|| vec![0.0; mk.out_features()]);
                mk.backward(xv.data(), vol, g.data(), gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(gx) = gx {
                    self.send(x, |acc, _| add_into(acc, &gx));
                }
                if let Some(gw) = gw {
                    self.send(w, |acc, _| add_into(acc, &gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.send(b, |acc, _| add_into(acc, &gb));
                }
            }
            Op::Pointwise { x, w, b } => {
                let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
                let (fo, fi) = (wv.dim(0), wv.dim(1));
                let inner = xv.len() / fi.max(1);
                self.send(x, |acc, _| {
                    for o in 0..fo {
                        let grow = &g.data()[o * inner..(o + 1) * inner];
                        for i in 0..fi {
                            let wv_ = wv.data()[o * fi + i];
                            for (a, &gg) in acc[i * inner..(i + 1) * inner].iter_mut().zip(grow) {
                                *a += wv_ * gg;
                            }
                        }
                    }
                });
                self.send(w, |acc, _| {
                    for o in 0..fo {
                        let grow = &g.data()[o * inner..(o + 1) * inner];
                        for i in 0..fi {
                            let xrow = &xv.data()[i * inner..(i + 1) * inner];
                            acc[o * fi + i] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                if let Some(b) = b {
                    self.send(b, |acc, _| channel_sums(acc, g.data()));
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                let (bn, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                let n = bv.dim(2);
                self.send(a, |acc, _| {
                    for bi in 0..bn {
                        for i in 0..m {
                            let grow = &g.data()[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for kk in 0..k {
                                let brow = &bv.data()[(bi * k + kk) * n..(bi * k + kk + 1) * n];
                                acc[(bi * m + i) * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                self.send(b, |acc, _| {
                    for bi in 0..bn {
                        for i in 0..m {
                            let grow = &g.data()[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for kk in 0..k {
                                let a_ = av.data()[(bi * m + i) * k + kk];
                                for (t, &gg) in acc[(bi * k + kk) * n..(bi * k + kk + 1) * n].iter_mut().zip(grow) {
                                    *t += a_ * gg;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn channel_sums(acc: &mut [f64], g: &[f64]) {
    let inner = g.len() / acc.len().max(1);
    for (a, chunk) in acc.iter_mut().zip(g.chunks(inner.max(1))) {
        *a += chunk.iter().sum::<f64>();
    }
}

struct BroadcastMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(src: &[usize], dst: &[usize]) -> Self {
        let mut strides = vec![0; src.len()];
        let mut s = 1;
        for i in (0..src.len()).rev() {
            strides[i] = if src[i] == 1 { 0 } else { s };
            s *= src[i];
        }
        BroadcastMap {
            out_shape: dst.to_vec(),
            src_strides: strides,
        }
    }

    fn source(&self, mut flat: usize) -> usize {
        let mut off = 0;
        for i in (0..self.out_shape.len()).rev() {
            let idx = flat % self.out_shape[i];
            flat /= self.out_shape[i];
            off += idx * self.src_strides[i];
        }
        off
    }
}
