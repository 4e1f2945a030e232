//! Building blocks shared by the transforms: convolutions, GDN/IGDN, PReLU
//! and the GDN-activated residual block.

use alloc::format;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Constraint, Group, ParamId, ParamStore};
use crate::tensor::{PadSpec, Tensor};

/// Lower bound on the GDN bias after every optimizer step.
pub const GDN_BETA_MIN: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: PadSpec,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan = (cin * kernel * kernel + cout * kernel * kernel / (stride * stride)) as f64;
        let bound = libm::sqrt(6.0 / fan);
        let weight = store.add(format!("{name}.weight"), uniform(&[cout, cin, kernel, kernel], bound, rng), Group::Main, Constraint::None);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), Group::Main, Constraint::None);
        Conv2d {
            weight,
            bias,
            stride,
            pad: PadSpec::same(kernel),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution producing `stride·H × stride·W`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub crop: PadSpec,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan = (cout * kernel * kernel + cin * kernel * kernel / (stride * stride)) as f64;
        let bound = libm::sqrt(6.0 / fan);
        let weight = store.add(format!("{name}.weight"), uniform(&[cin, cout, kernel, kernel], bound, rng), Group::Main, Constraint::None);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), Group::Main, Constraint::None);
        ConvTranspose2d {
            weight,
            bias,
            stride,
            crop: PadSpec::transpose_same(kernel, stride),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d_transpose(x, w, Some(b), self.stride, self.crop)
    }
}

/// Generalized divisive normalization over channels,
/// `y_i = x_i / sqrt(β_i + Σ_j γ_ij x_j²)`, or its approximate inverse
/// `x_i = y_i · sqrt(β_i + Σ_j γ_ij y_j²)`.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
}

impl Gdn {
    /// `β = 1`, `γ = 0.1·I`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = store.add(format!("{name}.beta"), Tensor::full(&[channels], 1.0), Group::Main, Constraint::Min(GDN_BETA_MIN));
        let gamma = Tensor::from_fn(&[channels, channels, 1, 1], |i| if i % (channels + 1) == 0 { 0.1 } else { 0.0 });
        let gamma = store.add(format!("{name}.gamma"), gamma, Group::Main, Constraint::Min(0.0));
        Gdn { beta, gamma, inverse }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let beta = g.param(store, self.beta);
        let gamma = g.param(store, self.gamma);
        gdn(g, x, beta, gamma, self.inverse)
    }
}

/// GDN on graph nodes: `beta: [C]`, `gamma: [C,C,1,1]`.
pub fn gdn(g: &mut Graph, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
    let c = g.shape(x).first().copied().unwrap_or(0);
    if g.shape(beta) != [c] || g.shape(gamma) != [c, c, 1, 1] {
        return Err(Error::shape("gdn", g.shape(x), g.shape(gamma)));
    }
    let sq = g.mul(x, x)?;
    let norm = g.conv2d(sq, gamma, Some(beta), 1, PadSpec::NONE)?;
    let root = g.sqrt(norm);
    if inverse {
        g.mul(x, root)
    } else {
        g.div(x, root)
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    pub alpha: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let alpha = store.add(format!("{name}.alpha"), Tensor::full(&[channels], 0.25), Group::Main, Constraint::None);
        Prelu { alpha }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = g.param(store, self.alpha);
        g.prelu(x, a)
    }
}

/// Pointwise nonlinearity used between convolutions.
#[derive(Clone, Debug)]
pub enum Activation {
    Gdn(Gdn),
    Prelu(Prelu),
    Relu,
}

impl Activation {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Activation::Gdn(l) => l.forward(g, store, x),
            Activation::Prelu(l) => l.forward(g, store, x),
            Activation::Relu => Ok(g.relu(x)),
        }
    }
}

/// Which nonlinearity family a transform is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    /// GDN in analysis, IGDN (or GDN, see `inverse_in_synthesis`) in synthesis.
    Gdn,
    Relu,
}

impl ActivationKind {
    pub fn build(self, store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Activation {
        match self {
            ActivationKind::Gdn => Activation::Gdn(Gdn::new(store, name, channels, inverse)),
            ActivationKind::Relu => Activation::Relu,
        }
    }
}

/// Placement of activations inside a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResBlockLayout {
    /// act → conv → act → conv → add
    ActivationFirst,
    /// conv → act → conv → act → add
    ConvFirst,
}

/// Two stride-1 3×3 convolutions with activations, plus an identity skip
/// unless disabled (the plain, same-depth comparison network).
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub act1: Activation,
    pub conv1: Conv2d,
    pub act2: Activation,
    pub conv2: Conv2d,
    pub layout: ResBlockLayout,
    pub skip: bool,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        act: ActivationKind,
        inverse: bool,
        layout: ResBlockLayout,
        skip: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let act1 = act.build(store, &format!("{name}.act1"), channels, inverse);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, rng);
        let act2 = act.build(store, &format!("{name}.act2"), channels, inverse);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, rng);
        ResBlock {
            act1,
            conv1,
            act2,
            conv2,
            layout,
            skip,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = match self.layout {
            ResBlockLayout::ActivationFirst => {
                let h = self.act1.forward(g, store, x)?;
                let h = self.conv1.forward(g, store, h)?;
                let h = self.act2.forward(g, store, h)?;
                self.conv2.forward(g, store, h)?
            }
            ResBlockLayout::ConvFirst => {
                let h = self.conv1.forward(g, store, x)?;
                let h = self.act1.forward(g, store, h)?;
                let h = self.conv2.forward(g, store, h)?;
                self.act2.forward(g, store, h)?
            }
        };
        if self.skip {
            g.add(x, h)
        } else {
            Ok(h)
        }
    }
}

/// Evaluates GDN on plain tensors (no tape).
pub fn gdn_eval(x: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, b, gm) = (g.constant(x.clone()), g.constant(beta.clone()), g.constant(gamma.clone()));
    let y = gdn(&mut g, xv, b, gm, inverse)?;
    Ok(g.value(y).clone())
}
