//! Entropy models: a fully factorized learned density for `ẑ` and a
//! conditional Gaussian for `ŷ`, each convolved with a unit uniform so that
//! integer symbols get probability mass `CDF(v + ½) − CDF(v − ½)`.
//!
//! Rates are in bits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Constraint, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Lower bound applied to σ before evaluating the Gaussian.
pub const SIGMA_MIN: f64 = 0.01;
/// Smallest probability any symbol may receive.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Hidden widths of the per-channel monotone CDF network.
pub const FACTORIZED_FILTERS: [usize; 3] = [3, 3, 3];
const FACTORIZED_INIT_SLOPE: f64 = 1.0 / 6.0;

fn widths() -> [usize; 5] {
    [1, FACTORIZED_FILTERS[0], FACTORIZED_FILTERS[1], FACTORIZED_FILTERS[2], 1]
}

/// Per-channel monotone CDF `c(x) = sigmoid(f₄ ∘ f₃ ∘ f₂ ∘ f₁(x))` with
/// `fₖ(x) = gₖ(softplus(Ĥₖ) x + bₖ)` and `gₖ(u) = u + tanh(âₖ) ⊙ tanh(u)`
/// for the hidden units. Nonnegative weights and `|tanh(â)| < 1` make every
/// unit strictly increasing.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    pub channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

impl FactorizedDensity {
    /// Initialized to an odd CDF `sigmoid(x/6)`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let w = widths();
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..w.len() - 1 {
            let (din, dout) = (w[k], w[k + 1]);
            let init = Tensor::from_fn(&[channels, dout, din], |i| {
                let h = if k == 0 {
                    FACTORIZED_INIT_SLOPE * [0.8, 1.0, 1.2][i % dout]
                } else {
                    1.0 / din as f64
                };
                math::softplus_inv(h)
            });
            matrices.push(store.add(format!("{name}.matrix{k}"), init, Group::Main, Constraint::None));
            biases.push(store.add(format!("{name}.bias{k}"), Tensor::zeros(&[channels, dout, 1]), Group::Main, Constraint::None));
            if k < w.len() - 2 {
                factors.push(store.add(format!("{name}.factor{k}"), Tensor::zeros(&[channels, dout, 1]), Group::Main, Constraint::None));
            }
        }
        FactorizedDensity {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.matrices.clone();
        v.extend(&self.biases);
        v.extend(&self.factors);
        v
    }

    /// Scalars per channel.
    pub fn params_per_channel() -> usize {
        let w = widths();
        (0..w.len() - 1).map(|k| w[k] * w[k + 1] + w[k + 1] + if k < w.len() - 2 { w[k + 1] } else { 0 }).sum()
    }

    /// CDF logits of `x: [C,1,P]`.
    fn logits(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let p = g.shape(x)[2];
        for k in 0..self.matrices.len() {
            let raw = g.param(store, self.matrices[k]);
            let h = g.softplus(raw);
            x = g.bmm(h, x)?;
            let shape = [self.channels, g.shape(x)[1], p];
            let b = g.param(store, self.biases[k]);
            let b = g.broadcast_to(b, &shape)?;
            x = g.add(x, b)?;
            if k < self.factors.len() {
                let raw = g.param(store, self.factors[k]);
                let a = g.tanh(raw);
                let a = g.broadcast_to(a, &shape)?;
                let t = g.tanh(x);
                let at = g.mul(a, t)?;
                x = g.add(x, at)?;
            }
        }
        Ok(x)
    }

    /// Differentiable per-element probability of `z: [C,H,W]`, floored.
    pub fn likelihood(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::shape("factorized likelihood", &shape, &[self.channels]));
        }
        let x = g.reshape(z, &[self.channels, 1, shape[1] * shape[2]])?;
        let hi = g.add_scalar(x, 0.5);
        let lo = g.add_scalar(x, -0.5);
        let upper = self.logits(g, store, hi)?;
        let lower = self.logits(g, store, lo)?;
        // evaluate on the side of the CDF where the difference is not a
        // cancellation of two numbers close to one
        let sign = g.value(upper).zip_map(g.value(lower), |u, l| if u + l > 0.0 { -1.0 } else { 1.0 })?;
        let sign = g.constant(sign);
        let su = g.mul(sign, upper)?;
        let sl = g.mul(sign, lower)?;
        let cu = g.sigmoid(su);
        let cl = g.sigmoid(sl);
        let d = g.sub(cu, cl)?;
        let d = g.abs(d);
        let d = g.clamp_min(d, LIKELIHOOD_FLOOR);
        g.reshape(d, &shape)
    }

    /// Tape-free copy of the current parameters.
    pub fn eval(&self, store: &ParamStore) -> FactorizedEval {
        let w = widths();
        let mut channels = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let mut layers = Vec::new();
            for k in 0..w.len() - 1 {
                let (din, dout) = (w[k], w[k + 1]);
                let m = store.get(self.matrices[k]).data();
                let b = store.get(self.biases[k]).data();
                let h = (0..dout * din).map(|i| math::softplus(m[c * dout * din + i])).collect();
                let bias = b[c * dout..(c + 1) * dout].to_vec();
                let factor = if k < self.factors.len() {
                    let a = store.get(self.factors[k]).data();
                    a[c * dout..(c + 1) * dout].iter().map(|&v| math::tanh(v)).collect()
                } else {
                    Vec::new()
                };
                layers.push(EvalLayer {
                    din,
                    dout,
                    h,
                    bias,
                    factor,
                });
            }
            channels.push(layers);
        }
        FactorizedEval { channels }
    }
}

#[derive(Clone, Debug)]
struct EvalLayer {
    din: usize,
    dout: usize,
    h: Vec<f64>,
    bias: Vec<f64>,
    factor: Vec<f64>,
}

/// Evaluates a [`FactorizedDensity`] without a tape.
#[derive(Clone, Debug)]
pub struct FactorizedEval {
    channels: Vec<Vec<EvalLayer>>,
}

impl FactorizedEval {
    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn logit(&self, c: usize, x: f64) -> f64 {
        let mut cur = vec![x];
        for l in &self.channels[c] {
            let mut next = vec![0.0; l.dout];
            for (o, n) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &v) in cur.iter().enumerate() {
                    acc += l.h[o * l.din + i] * v;
                }
                acc += l.bias[o];
                if !l.factor.is_empty() {
                    acc += l.factor[o] * math::tanh(acc);
                }
                *n = acc;
            }
            cur = next;
        }
        cur[0]
    }

    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        math::sigmoid(self.logit(c, x))
    }

    /// Unfloored mass of integer `v` in channel `c`.
    pub fn mass(&self, c: usize, v: f64) -> f64 {
        let (u, l) = (self.logit(c, v + 0.5), self.logit(c, v - 0.5));
        let s = if u + l > 0.0 { -1.0 } else { 1.0 };
        (math::sigmoid(s * u) - math::sigmoid(s * l)).abs()
    }

    pub fn likelihood(&self, c: usize, v: f64) -> f64 {
        self.mass(c, v).max(LIKELIHOOD_FLOOR)
    }
}

/// Probabilities of `ẑ: [C,H,W]` under the factorized density.
pub fn likelihood_z(density: &FactorizedEval, z: &Tensor) -> Result<Tensor> {
    if z.rank() != 3 || z.dim(0) != density.channels() {
        return Err(Error::shape("likelihood_z", z.shape(), &[density.channels()]));
    }
    let plane = z.dim(1) * z.dim(2);
    Ok(Tensor::from_fn(z.shape(), |i| density.likelihood(i / plane, z.data()[i])))
}

pub fn rate_z(density: &FactorizedEval, z: &Tensor) -> Result<f64> {
    Ok(bits(&likelihood_z(density, z)?))
}

/// `Φ((½ − v)/σ) − Φ((−½ − v)/σ)` with `v = |y − μ|`, i.e. the unit-interval
/// mass of `N(μ, σ)` around `y`, evaluated on the lower tail for accuracy.
pub fn gaussian_mass(y: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_MIN);
    let v = (y - mu).abs();
    math::normal_cdf((0.5 - v) / s) - math::normal_cdf((-0.5 - v) / s)
}

/// [`gaussian_mass`] floored at [`LIKELIHOOD_FLOOR`].
pub fn gaussian_likelihood(y: f64, mu: f64, sigma: f64) -> f64 {
    gaussian_mass(y, mu, sigma).max(LIKELIHOOD_FLOOR)
}

pub fn likelihood_y(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if y.shape() != mu.shape() || y.shape() != sigma.shape() {
        return Err(Error::shape("likelihood_y", y.shape(), mu.shape()));
    }
    Ok(Tensor::from_fn(y.shape(), |i| gaussian_likelihood(y.data()[i], mu.data()[i], sigma.data()[i])))
}

pub fn rate_y(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    Ok(bits(&likelihood_y(y, mu, sigma)?))
}

/// `−Σ log₂ p`.
pub fn bits(p: &Tensor) -> f64 {
    -p.data().iter().map(|&v| math::log2(v)).sum::<f64>()
}

/// Differentiable Gaussian likelihood on the tape.
pub fn gaussian_likelihood_graph(g: &mut Graph, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let s = g.clamp_min(sigma, SIGMA_MIN);
    let d = g.sub(y, mu)?;
    let v = g.abs(d);
    let neg = g.scale(v, -1.0);
    let hi = g.add_scalar(neg, 0.5);
    let lo = g.add_scalar(neg, -0.5);
    let hi = g.div(hi, s)?;
    let lo = g.div(lo, s)?;
    let ch = g.normal_cdf(hi);
    let cl = g.normal_cdf(lo);
    let p = g.sub(ch, cl)?;
    Ok(g.clamp_min(p, LIKELIHOOD_FLOOR))
}

/// Differentiable `−Σ log₂ p`.
pub fn bits_graph(g: &mut Graph, p: Var) -> Var {
    let l = g.log(p);
    let s = g.sum(l);
    g.scale(s, -core::f64::consts::LOG2_E)
}

/// Training-time quantization proxy: adds i.i.d. `U(−½, ½)` noise.
pub fn noisy_quantize(y: &Tensor, rng: &mut impl Rng) -> Tensor {
    let d = y.data();
    Tensor::from_fn(y.shape(), |i| d[i] + rng.gen_range(-0.5..0.5))
}

/// Inference quantization: rounds half away from zero.
pub fn round_quantize(y: &Tensor) -> Tensor {
    // `+ 0.0` turns `-0.0` into `0.0` so decoded latents match bitwise.
    y.map(|v| math::round_half_away(v) + 0.0)
}
