//! The full codec: analysis/synthesis transforms, hyper transforms, the
//! information compensation network, and `compress`/`decompress`.
//!
//! ```text
//! x ─E→ y ─Q→ ŷ ─────────────────────────────┬─→ [ŷ, I(z_p)] ─D→ x̂
//!        └h_e→ z ─Q→ ẑ ─h_d→ z_p ─P(ŷ, z_p)→ (μ, σ)        │
//!                              └────────I─────────────────┘
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::bitstream::{self, Header};
use crate::context::{ContextConfig, ContextModel};
use crate::entropy::{self, FactorizedDensity, FactorizedEval};
use crate::error::{Error, Result};
use crate::layers::{Activation, ActivationKind, Conv2d, ConvTranspose2d, Prelu, ResBlock, ResBlockLayout};
use crate::math;
use crate::params::{fnv1a, ParamId, ParamStore, FNV_OFFSET};
use crate::rangecoder::{self, GaussianKey, QuantizedCdf, RangeDecoder, RangeEncoder};
use crate::tensor::Tensor;

/// λ values with a one-byte index in the stream header.
pub const LAMBDA_PRESETS: [f64; 5] = [2.0, 8.0, 32.0, 128.0, 384.0];

/// Images are reflect-padded to a multiple of this before coding.
pub const PAD_MULTIPLE: usize = 64;

/// Total downsampling of the analysis transform.
pub const LATENT_STRIDE: usize = 16;

/// Additional downsampling of the hyper encoder.
pub const HYPER_STRIDE: usize = 4;

/// Nonlinearity family of the main transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformVariant {
    /// GDN/IGDN stages with GDN residual blocks.
    GdnResidual,
    /// Same depth with ReLU activations and no skip connections.
    PlainRelu,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Transform width `N`.
    pub n: usize,
    /// Latent channels `M`.
    pub m: usize,
    /// Kernel size of the stride-2 stages.
    pub kernel: usize,
    pub variant: TransformVariant,
    /// IGDN in the synthesis transform (GDN when false).
    pub inverse_gdn: bool,
    pub context: ContextConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            n: 48,
            m: 32,
            kernel: 5,
            variant: TransformVariant::GdnResidual,
            inverse_gdn: true,
            context: ContextConfig::default(),
        }
    }

    /// Full-size configuration.
    pub fn full() -> Self {
        ModelConfig {
            n: 192,
            m: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.m > self.n {
            return Err(Error::invalid(format!("need 0 < M <= N, got N={} M={}", self.n, self.m)));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::invalid("transform kernel must be odd and >= 3"));
        }
        if self.context.hyper_features != 2 {
            return Err(Error::invalid("z_p carries exactly 2 features per latent channel"));
        }
        self.context.validate()
    }

    /// Channels of the hyper-decoder output `z_p`.
    pub fn zp_channels(&self) -> usize {
        2 * self.m
    }

    fn hash(&self) -> u64 {
        let mut h = fnv1a(FNV_OFFSET, b"gcmc-model");
        for v in [
            self.n,
            self.m,
            self.kernel,
            self.variant as usize,
            self.inverse_gdn as usize,
            self.context.layers,
            self.context.gate_width,
            self.context.kernel,
            self.context.hyper_features,
            self.context.horizontal_residual as usize,
        ] {
            h = fnv1a(h, &(v as u64).to_le_bytes());
        }
        h
    }
}

/// Index of `lambda` in [`LAMBDA_PRESETS`], or the nearest preset.
pub fn lambda_index(lambda: f64) -> u8 {
    let mut best = 0;
    for (i, &l) in LAMBDA_PRESETS.iter().enumerate() {
        if (l - lambda).abs() < (LAMBDA_PRESETS[best] - lambda).abs() {
            best = i;
        }
    }
    best as u8
}

#[derive(Clone)]
struct Analysis {
    convs: [Conv2d; 4],
    acts: [Activation; 3],
    blocks: [ResBlock; 2],
}

#[derive(Clone)]
struct Synthesis {
    convs: [ConvTranspose2d; 4],
    acts: [Activation; 3],
    blocks: [ResBlock; 2],
}

#[derive(Clone)]
struct HyperEncoder {
    conv1: Conv2d,
    act: Prelu,
    conv2: Conv2d,
}

#[derive(Clone)]
struct HyperDecoder {
    conv1: ConvTranspose2d,
    act: Prelu,
    conv2: ConvTranspose2d,
}

#[derive(Clone)]
struct Icn {
    project: Conv2d,
    units: Vec<(Conv2d, Prelu, Conv2d)>,
}

/// Initial scale of the analysis output relative to its fan-in init, undone
/// by the first synthesis stage. Small models otherwise start with latents
/// buried under the quantization noise.
pub const LATENT_INIT_GAIN: f64 = 8.0;

/// Number of residual units in the compensation network.
pub const ICN_UNITS: usize = 3;

/// All networks and their parameters.
#[derive(Clone)]
pub struct CodecModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    analysis: Analysis,
    synthesis: Synthesis,
    hyper_enc: HyperEncoder,
    hyper_dec: HyperDecoder,
    icn: Icn,
    pub context: ContextModel,
    pub factorized: FactorizedDensity,
}

/// Values produced by one differentiable forward pass.
pub struct TrainForward {
    pub x_hat: Var,
    pub y_tilde: Var,
    pub z_tilde: Var,
    pub mu: Var,
    pub sigma: Var,
    /// `R_y` in bits.
    pub rate_y: Var,
    /// `R_z` in bits.
    pub rate_z: Var,
}

/// How the quantizer is modelled in a training forward pass.
pub enum Quantizer<'a, R: Rng> {
    /// Additive `U(−½, ½)` noise drawn from the generator.
    Noise(&'a mut R),
    /// Hard rounding (no gradient through the rounding itself).
    Round,
}

pub struct Compressed {
    pub bytes: Vec<u8>,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    /// Rate estimate in bits from the snapped tables, header excluded.
    pub estimated_bits: f64,
}

pub struct Decompressed {
    pub image: Tensor,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub header: Header,
}

impl CodecModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (n, m, k) = (config.n, config.m, config.kernel);
        let (act_kind, skip) = match config.variant {
            TransformVariant::GdnResidual => (ActivationKind::Gdn, true),
            TransformVariant::PlainRelu => (ActivationKind::Relu, false),
        };
        let layout = ResBlockLayout::ActivationFirst;

        let analysis = Analysis {
            convs: [
                Conv2d::new(s, "enc.conv0", 3, n, k, 2, rng),
                Conv2d::new(s, "enc.conv1", n, n, k, 2, rng),
                Conv2d::new(s, "enc.conv2", n, n, k, 2, rng),
                Conv2d::new(s, "enc.conv3", n, m, k, 2, rng),
            ],
            acts: [
                act_kind.build(s, "enc.act0", n, false),
                act_kind.build(s, "enc.act1", n, false),
                act_kind.build(s, "enc.act2", n, false),
            ],
            blocks: [
                ResBlock::new(s, "enc.res1", n, act_kind, false, layout, skip, rng),
                ResBlock::new(s, "enc.res2", n, act_kind, false, layout, skip, rng),
            ],
        };
        let hyper_enc = HyperEncoder {
            conv1: Conv2d::new(s, "henc.conv0", m, n, k, 2, rng),
            act: Prelu::new(s, "henc.act", n),
            conv2: Conv2d::new(s, "henc.conv1", n, n, k, 2, rng),
        };
        let hyper_dec = HyperDecoder {
            conv1: ConvTranspose2d::new(s, "hdec.conv0", n, n, k, 2, rng),
            act: Prelu::new(s, "hdec.act", n),
            conv2: ConvTranspose2d::new(s, "hdec.conv1", n, config.zp_channels(), k, 2, rng),
        };
        let icn = Icn {
            project: Conv2d::new(s, "icn.project", config.zp_channels(), m, 1, 1, rng),
            units: (0..ICN_UNITS)
                .map(|i| {
                    (
                        Conv2d::new(s, &format!("icn.unit{i}.conv0"), m, m, 3, 1, rng),
                        Prelu::new(s, &format!("icn.unit{i}.act"), m),
                        Conv2d::new(s, &format!("icn.unit{i}.conv1"), m, m, 3, 1, rng),
                    )
                })
                .collect(),
        };
        let inv = config.inverse_gdn;
        let synthesis = Synthesis {
            convs: [
                ConvTranspose2d::new(s, "dec.conv0", 2 * m, n, k, 2, rng),
                ConvTranspose2d::new(s, "dec.conv1", n, n, k, 2, rng),
                ConvTranspose2d::new(s, "dec.conv2", n, n, k, 2, rng),
                ConvTranspose2d::new(s, "dec.conv3", n, 3, k, 2, rng),
            ],
            acts: [
                act_kind.build(s, "dec.act0", n, inv),
                act_kind.build(s, "dec.act1", n, inv),
                act_kind.build(s, "dec.act2", n, inv),
            ],
            blocks: [
                ResBlock::new(s, "dec.res0", n, act_kind, inv, layout, skip, rng),
                ResBlock::new(s, "dec.res1", n, act_kind, inv, layout, skip, rng),
            ],
        };
        for (id, gain) in [(analysis.convs[3].weight, LATENT_INIT_GAIN), (synthesis.convs[0].weight, 1.0 / LATENT_INIT_GAIN)] {
            for v in s.get_mut(id).data_mut() {
                *v *= gain;
            }
        }
        let context = ContextModel::new(s, "ctx", config.context, rng)?;
        let factorized = FactorizedDensity::new(s, "prior", n);
        Ok(CodecModel {
            config,
            store,
            analysis,
            synthesis,
            hyper_enc,
            hyper_dec,
            icn,
            context,
            factorized,
        })
    }

    /// Binds parameters to the model; fails unless names and shapes match.
    pub fn load_params(&mut self, params: Vec<(alloc::string::String, Tensor)>) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::invalid(format!("expected {} tensors, got {}", self.store.len(), params.len())));
        }
        for (name, t) in params {
            let id = self
                .store
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            self.store.set(id, t)?;
        }
        Ok(())
    }

    /// Binds the model to its parameter values: config and every bit of
    /// every parameter.
    pub fn config_hash(&self) -> u64 {
        self.store.fingerprint(self.config.hash())
    }

    pub fn analysis(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = &self.analysis;
        let st = &self.store;
        let mut h = a.convs[0].forward(g, st, x)?;
        h = a.acts[0].forward(g, st, h)?;
        h = a.convs[1].forward(g, st, h)?;
        h = a.acts[1].forward(g, st, h)?;
        h = a.blocks[0].forward(g, st, h)?;
        h = a.convs[2].forward(g, st, h)?;
        h = a.acts[2].forward(g, st, h)?;
        h = a.blocks[1].forward(g, st, h)?;
        a.convs[3].forward(g, st, h)
    }

    pub fn hyper_analysis(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let st = &self.store;
        let h = self.hyper_enc.conv1.forward(g, st, y)?;
        let h = self.hyper_enc.act.forward(g, st, h)?;
        self.hyper_enc.conv2.forward(g, st, h)
    }

    pub fn hyper_synthesis(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let st = &self.store;
        let h = self.hyper_dec.conv1.forward(g, st, z)?;
        let h = self.hyper_dec.act.forward(g, st, h)?;
        self.hyper_dec.conv2.forward(g, st, h)
    }

    pub fn compensation(&self, g: &mut Graph, zp: Var) -> Result<Var> {
        let st = &self.store;
        let mut h = self.icn.project.forward(g, st, zp)?;
        for (c0, act, c1) in &self.icn.units {
            let r = c0.forward(g, st, h)?;
            let r = act.forward(g, st, r)?;
            let r = c1.forward(g, st, r)?;
            h = g.add(h, r)?;
        }
        Ok(h)
    }

    /// `D([ŷ, I(z_p)])` without clamping.
    pub fn synthesis(&self, g: &mut Graph, y: Var, zp: Var) -> Result<Var> {
        let s = &self.synthesis;
        let st = &self.store;
        let comp = self.compensation(g, zp)?;
        let mut h = g.concat0(&[y, comp])?;
        h = s.convs[0].forward(g, st, h)?;
        h = s.acts[0].forward(g, st, h)?;
        h = s.blocks[0].forward(g, st, h)?;
        h = s.convs[1].forward(g, st, h)?;
        h = s.acts[1].forward(g, st, h)?;
        h = s.blocks[1].forward(g, st, h)?;
        h = s.convs[2].forward(g, st, h)?;
        h = s.acts[2].forward(g, st, h)?;
        s.convs[3].forward(g, st, h)
    }

    /// Differentiable end-to-end pass over one `[3,H,W]` image whose sides
    /// are multiples of 64. The context model sees the same quantized
    /// latent as the rate and reconstruction paths.
    pub fn forward_train<R: Rng>(&self, g: &mut Graph, x: Var, quantizer: Quantizer<'_, R>) -> Result<TrainForward> {
        check_image_shape(g.shape(x), true)?;
        let y = self.analysis(g, x)?;
        let z = self.hyper_analysis(g, y)?;
        let (y_tilde, z_tilde) = match quantizer {
            Quantizer::Noise(rng) => {
                let ny = Tensor::from_fn(g.shape(y), |_| rng.gen_range(-0.5..0.5));
                let nz = Tensor::from_fn(g.shape(z), |_| rng.gen_range(-0.5..0.5));
                let (ny, nz) = (g.constant(ny), g.constant(nz));
                (g.add(y, ny)?, g.add(z, nz)?)
            }
            Quantizer::Round => {
                let ry = entropy::round_quantize(g.value(y));
                let rz = entropy::round_quantize(g.value(z));
                (g.constant(ry), g.constant(rz))
            }
        };
        let pz = self.factorized.likelihood(g, &self.store, z_tilde)?;
        let rate_z = entropy::bits_graph(g, pz);
        let zp = self.hyper_synthesis(g, z_tilde)?;
        let (mu, sigma) = self.context.forward(g, &self.store, y_tilde, zp)?;
        let py = entropy::gaussian_likelihood_graph(g, y_tilde, mu, sigma)?;
        let rate_y = entropy::bits_graph(g, py);
        let x_hat = self.synthesis(g, y_tilde, zp)?;
        Ok(TrainForward {
            x_hat,
            y_tilde,
            z_tilde,
            mu,
            sigma,
            rate_y,
            rate_z,
        })
    }

    /// Parameters of the entropy model of `ẑ` and the context model.
    pub fn entropy_param_ids(&self) -> Vec<ParamId> {
        let mut v = self.context.param_ids();
        v.extend(self.factorized.param_ids());
        v
    }

    fn factorized_tables(&self, eval: &FactorizedEval) -> Result<Vec<QuantizedCdf>> {
        (0..self.config.n).map(|c| rangecoder::latent_cdf(|v| eval.mass(c, v as f64))).collect()
    }

    /// Encodes a `[3,H,W]` image in `[0,1]` of any size.
    pub fn compress(&self, x: &Tensor, lambda_index: u8) -> Result<Compressed> {
        check_image_shape(x.shape(), false)?;
        let (h, w) = (x.dim(1), x.dim(2));
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::invalid(format!("image {w}x{h} exceeds 65535 pixels per side")));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        let xp = reflect_pad(x, padded(h), padded(w))?;
        let mut g = Graph::inference();
        let xv = g.constant(xp);
        let yv = self.analysis(&mut g, xv)?;
        let zv = self.hyper_analysis(&mut g, yv)?;
        let y_hat = entropy::round_quantize(g.value(yv));
        let z_hat = entropy::round_quantize(g.value(zv));
        let z_vals = to_symbols(&z_hat)?;
        let y_vals = to_symbols(&y_hat)?;

        let prior = self.factorized.eval(&self.store);
        let tables = self.factorized_tables(&prior)?;
        let plane_z = z_hat.dim(1) * z_hat.dim(2);
        let mut enc = RangeEncoder::new();
        let mut estimate = 0.0;
        for (i, &v) in z_vals.iter().enumerate() {
            let c = i / plane_z;
            enc.encode_latent(&tables[c], v)?;
            estimate -= math::log2(prior.likelihood(c, v as f64));
        }
        let z_segment = enc.finish();

        let zp = self.zp_from(&z_hat)?;
        let engine = self.context.engine(&self.store)?;
        let (mu, sigma) = engine.predict(&y_hat, &zp)?;
        let sigmas = rangecoder::sigma_table();
        let mut cache = BTreeMap::new();
        let mut enc = RangeEncoder::new();
        for (i, &v) in y_vals.iter().enumerate() {
            let key = GaussianKey::snap(mu.data()[i], sigma.data()[i]);
            let cdf = table_for(&mut cache, key, &sigmas)?;
            enc.encode_latent(cdf, v)?;
            estimate -= math::log2(entropy::gaussian_likelihood(v as f64, key.mu(), key.sigma(&sigmas)));
        }
        let y_segment = enc.finish();

        let header = Header {
            version: bitstream::VERSION,
            config_hash: self.config_hash(),
            width: w as u16,
            height: h as u16,
            lambda_index,
            z_len: u32::try_from(z_segment.len()).map_err(|_| Error::invalid("z segment too long"))?,
        };
        let bytes = bitstream::write(&header, &z_segment, &y_segment)?;
        Ok(Compressed {
            bytes,
            y_hat,
            z_hat,
            estimated_bits: estimate,
        })
    }

    fn zp_from(&self, z_hat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let zv = g.constant(z_hat.clone());
        let zp = self.hyper_synthesis(&mut g, zv)?;
        Ok(g.value(zp).clone())
    }

    /// Reconstruction from quantized latents, cropped to `h × w` and clamped
    /// to `[0,1]`.
    pub fn reconstruct(&self, y_hat: &Tensor, z_hat: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let zp = self.zp_from(z_hat)?;
        let mut g = Graph::inference();
        let yv = g.constant(y_hat.clone());
        let zv = g.constant(zp);
        let xv = self.synthesis(&mut g, yv, zv)?;
        let full = g.value(xv);
        Ok(crop(full, h, w)?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn decompress(&self, bytes: &[u8]) -> Result<Decompressed> {
        let stream = bitstream::parse(bytes)?;
        let header = stream.header;
        let expected = self.config_hash();
        if header.config_hash != expected {
            return Err(Error::HashMismatch {
                stream: header.config_hash,
                model: expected,
            });
        }
        let (h, w) = (header.height as usize, header.width as usize);
        let (hp, wp) = (padded(h), padded(w));
        let (n, m) = (self.config.n, self.config.m);
        let z_shape = [n, hp / (LATENT_STRIDE * HYPER_STRIDE), wp / (LATENT_STRIDE * HYPER_STRIDE)];
        let y_shape = [m, hp / LATENT_STRIDE, wp / LATENT_STRIDE];

        let prior = self.factorized.eval(&self.store);
        let tables = self.factorized_tables(&prior)?;
        let plane_z = z_shape[1] * z_shape[2];
        let mut dec = RangeDecoder::new(stream.z_segment)?;
        let mut z = Vec::with_capacity(n * plane_z);
        for i in 0..n * plane_z {
            z.push(dec.decode_latent(&tables[i / plane_z])? as f64);
        }
        let z_hat = Tensor::new(&z_shape, z)?;

        let zp = self.zp_from(&z_hat)?;
        let engine = self.context.engine(&self.store)?;
        let sigmas = rangecoder::sigma_table();
        let mut cache = BTreeMap::new();
        let mut dec = RangeDecoder::new(stream.y_segment)?;
        let mut ctx = engine.decoder(&y_shape, &zp)?;
        for p in 0..ctx.len() {
            let (mu, sigma) = ctx.step(p)?;
            let cdf = table_for(&mut cache, GaussianKey::snap(mu, sigma), &sigmas)?;
            ctx.push(dec.decode_latent(cdf)? as f64)?;
        }
        let y_hat = ctx.latent()?;
        let image = self.reconstruct(&y_hat, &z_hat, h, w)?;
        Ok(Decompressed {
            image,
            y_hat,
            z_hat,
            header,
        })
    }
}

fn table_for<'c>(cache: &'c mut BTreeMap<GaussianKey, QuantizedCdf>, key: GaussianKey, sigmas: &[f64; rangecoder::SIGMA_LEVELS]) -> Result<&'c QuantizedCdf> {
    if !cache.contains_key(&key) {
        cache.insert(key, rangecoder::gaussian_cdf(key, sigmas)?);
    }
    Ok(&cache[&key])
}

fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.is_finite() && v >= i32::MIN as f64 && v <= i32::MAX as f64 {
                Ok(v as i32)
            } else {
                Err(Error::NonFinite(format!("latent value {v} not codable")))
            }
        })
        .collect()
}

fn check_image_shape(shape: &[usize], aligned: bool) -> Result<()> {
    if shape.len() != 3 || shape[0] != 3 || shape[1] == 0 || shape[2] == 0 {
        return Err(Error::shape("image", shape, &[3, 0, 0]));
    }
    if aligned && (shape[1] % PAD_MULTIPLE != 0 || shape[2] % PAD_MULTIPLE != 0) {
        return Err(Error::invalid(format!("image sides must be multiples of {PAD_MULTIPLE}, got {shape:?}")));
    }
    Ok(())
}

/// Smallest multiple of [`PAD_MULTIPLE`] not below `n`.
pub fn padded(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE).max(1) * PAD_MULTIPLE
}

/// Mirror index for reflection without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads a `[C,H,W]` tensor at the bottom and right to `h × w`.
pub fn reflect_pad(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.rank() != 3 || h < x.dim(1) || w < x.dim(2) {
        return Err(Error::shape("reflect_pad", x.shape(), &[x.dim(0), h, w]));
    }
    let (c, sh, sw) = (x.dim(0), x.dim(1), x.dim(2));
    let d = x.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, yy, xx) = (i / (h * w), (i / w) % h, i % w);
        d[(ch * sh + reflect(yy, sh)) * sw + reflect(xx, sw)]
    }))
}

/// Top-left `h × w` window of a `[C,H,W]` tensor.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.rank() != 3 || h > x.dim(1) || w > x.dim(2) {
        return Err(Error::shape("crop", x.shape(), &[x.dim(0), h, w]));
    }
    let (sh, sw) = (x.dim(1), x.dim(2));
    let d = x.data();
    Ok(Tensor::from_fn(&[x.dim(0), h, w], |i| {
        let (ch, yy, xx) = (i / (h * w), (i / w) % h, i % w);
        d[(ch * sh + yy) * sw + xx]
    }))
}
