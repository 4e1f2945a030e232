//! Rate-distortion objective, per-image gradients and the Adam optimizer.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::codec::{CodecModel, Quantizer};
use crate::error::{Error, Result};
use crate::metrics::{self, MsSsimConfig};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Distortion term `D` of `λ·D + R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    /// `1 − MS-SSIM`.
    MsSsim,
    /// Mean squared error on the `[0,1]` scale.
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr_main: f64,
    /// Main learning rate once `lr_drop_epoch` is reached.
    pub lr_main_late: f64,
    pub lr_drop_epoch: usize,
    pub lr_context: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; `0` means no cap.
    pub max_steps: usize,
    pub seed: u64,
    pub distortion: Distortion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 32.0,
            lr_main: 1e-4,
            lr_main_late: 1e-5,
            lr_drop_epoch: 30,
            lr_context: 5e-5,
            batch_size: 8,
            crop: 64,
            epochs: 40,
            max_steps: 0,
            seed: 0,
            distortion: Distortion::MsSsim,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_main, self.lr_main_late, self.lr_context];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.crop == 0 || self.crop % crate::codec::PAD_MULTIPLE != 0 {
            return Err(Error::invalid(format!("crop must be a positive multiple of {}", crate::codec::PAD_MULTIPLE)));
        }
        Ok(())
    }

    /// Step-function schedule for the main group.
    pub fn lr(&self, group: Group, epoch: usize) -> f64 {
        match group {
            Group::Context => self.lr_context,
            Group::Main if epoch >= self.lr_drop_epoch => self.lr_main_late,
            Group::Main => self.lr_main,
        }
    }
}

/// `λ·D + R` with the rate in bits per pixel.
pub fn rd_objective(lambda: f64, distortion: f64, bpp: f64) -> f64 {
    lambda * distortion + bpp
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub rate_bpp: f64,
    /// MS-SSIM `d` (or `1 − mse` for the MSE objective).
    pub quality: f64,
}

impl LossTerms {
    /// Mean of several evaluations, in order.
    pub fn mean(items: &[LossTerms]) -> LossTerms {
        let n = items.len().max(1) as f64;
        let mut acc = LossTerms {
            loss: 0.0,
            rate_bpp: 0.0,
            quality: 0.0,
        };
        for t in items {
            acc.loss += t.loss;
            acc.rate_bpp += t.rate_bpp;
            acc.quality += t.quality;
        }
        LossTerms {
            loss: acc.loss / n,
            rate_bpp: acc.rate_bpp / n,
            quality: acc.quality / n,
        }
    }
}

/// Noise stream for one image of one step, independent of thread layout.
pub fn noise_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"gcmcnois");
    ChaCha8Rng::from_seed(key)
}

/// Loss and parameter gradients for one `[3,H,W]` training crop.
pub fn example_gradients(model: &CodecModel, x: &Tensor, lambda: f64, distortion: Distortion, rng: &mut ChaCha8Rng) -> Result<(LossTerms, Vec<(ParamId, Tensor)>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let f = model.forward_train(&mut g, xv, Quantizer::Noise(rng))?;
    let pixels = (x.dim(1) * x.dim(2)) as f64;
    let rate = g.add(f.rate_y, f.rate_z)?;
    let bpp = g.scale(rate, 1.0 / pixels);
    let (dist, quality) = match distortion {
        Distortion::MsSsim => {
            let d = metrics::ms_ssim_graph(&mut g, xv, f.x_hat, &MsSsimConfig::default())?;
            let q = g.value(d).item()?;
            let neg = g.scale(d, -1.0);
            (g.add_scalar(neg, 1.0), q)
        }
        Distortion::Mse => {
            let m = metrics::mse_graph(&mut g, xv, f.x_hat)?;
            let q = 1.0 - g.value(m).item()?;
            (m, q)
        }
    };
    let weighted = g.scale(dist, lambda);
    let loss = g.add(weighted, bpp)?;
    let terms = LossTerms {
        loss: g.value(loss).item()?,
        rate_bpp: g.value(bpp).item()?,
        quality,
    };
    if !terms.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {} (rate {} bpp, quality {})", terms.loss, terms.rate_bpp, terms.quality)));
    }
    g.backward(loss)?;
    Ok((terms, g.param_grads()))
}

/// Sums per-image gradients in the given order and divides by their count.
pub fn average_gradients(store: &ParamStore, per_image: &[Vec<(ParamId, Tensor)>]) -> Result<Vec<Tensor>> {
    let mut acc: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
    for grads in per_image {
        for (id, t) in grads {
            acc[id.index()].axpy(1.0, t)?;
        }
    }
    let scale = 1.0 / per_image.len().max(1) as f64;
    for t in &mut acc {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok(acc)
}

/// Adam with bias correction; parameters are reprojected onto their
/// constraints after every step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moment estimates, for checkpointing.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        for ((a, b), c) in self.m.iter().zip(&m).zip(&v) {
            if a.shape() != b.shape() || a.shape() != c.shape() {
                return Err(Error::shape("adam restore", a.shape(), b.shape()));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update with a learning rate per parameter group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: impl Fn(Group) -> f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let rate = lr(store.group(id));
            let g = grads[i].data();
            if grads[i].shape() != store.get(id).shape() {
                return Err(Error::shape("adam", store.get(id).shape(), grads[i].shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= rate * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        store.project();
        Ok(())
    }
}
