//! Finite-difference gradient cases. Each case builds its inputs from a seed
//! and returns the norm-wise relative error between the tape gradient and a
//! central difference.
#![allow(dead_code)]

use gcmc_core::autodiff::check::{check_inputs, check_params, STEP};
use gcmc_core::autodiff::{Graph, Var};
use gcmc_core::codec::{CodecModel, ModelConfig, Quantizer};
use gcmc_core::context::{build_masks, ContextConfig, ContextModel, MaskType, Stack};
use gcmc_core::entropy::{self, FactorizedDensity};
use gcmc_core::layers::{ActivationKind, Conv2d, ConvTranspose2d, Gdn, Prelu, ResBlock, ResBlockLayout};
use gcmc_core::metrics::{self, MsSsimConfig};
use gcmc_core::params::{ParamId, ParamStore};
use gcmc_core::tensor::PadSpec;
use gcmc_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Magnitudes in `[lo, hi]` with random signs.
fn signed(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = r.gen_range(lo..hi);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Up to `per` random flat coordinates from each listed parameter.
fn coords(store: &ParamStore, ids: &[ParamId], per: usize, r: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for &id in ids {
        let mut idx: Vec<usize> = (0..store.get(id).len()).collect();
        idx.shuffle(r);
        out.extend(idx.into_iter().take(per).map(|i| (id, i)));
    }
    out
}

fn unary(seed: u64, f: fn(&mut Graph, Var) -> Var, lo: f64, hi: f64, sign: bool) -> Result<f64> {
    let mut r = rng(seed);
    let x = if sign { signed(&[3, 4], lo, hi, &mut r) } else { uniform(&[3, 4], lo, hi, &mut r) };
    check_inputs(&[x], |g, v| Ok(f(g, v[0])), STEP)
}

fn binary(seed: u64, f: fn(&mut Graph, Var, Var) -> Result<Var>, positive_b: bool) -> Result<f64> {
    let mut r = rng(seed);
    let a = uniform(&[2, 5], -2.0, 2.0, &mut r);
    let b = if positive_b { uniform(&[2, 5], 0.5, 2.0, &mut r) } else { uniform(&[2, 5], -2.0, 2.0, &mut r) };
    check_inputs(&[a, b], |g, v| f(g, v[0], v[1]), STEP)
}

fn op_cases() -> Vec<Case> {
    vec![
        Case { name: "add", run: |s| binary(s, |g, a, b| g.add(a, b), false) },
        Case { name: "sub", run: |s| binary(s, |g, a, b| g.sub(a, b), false) },
        Case { name: "mul", run: |s| binary(s, |g, a, b| g.mul(a, b), false) },
        Case { name: "div", run: |s| binary(s, |g, a, b| g.div(a, b), true) },
        Case { name: "scale", run: |s| unary(s, |g, a| g.scale(a, -1.7), -2.0, 2.0, false) },
        Case { name: "add_scalar", run: |s| unary(s, |g, a| g.add_scalar(a, 0.3), -2.0, 2.0, false) },
        Case { name: "tanh", run: |s| unary(s, |g, a| g.tanh(a), -3.0, 3.0, false) },
        Case { name: "sigmoid", run: |s| unary(s, |g, a| g.sigmoid(a), -5.0, 5.0, false) },
        Case { name: "exp", run: |s| unary(s, |g, a| g.exp(a), -2.0, 2.0, false) },
        Case { name: "log", run: |s| unary(s, |g, a| g.log(a), 0.2, 3.0, false) },
        Case { name: "sqrt", run: |s| unary(s, |g, a| g.sqrt(a), 0.2, 3.0, false) },
        Case { name: "powf", run: |s| unary(s, |g, a| g.powf(a, 0.37), 0.2, 3.0, false) },
        Case { name: "softplus", run: |s| unary(s, |g, a| g.softplus(a), -6.0, 6.0, false) },
        Case { name: "relu", run: |s| unary(s, |g, a| g.relu(a), 0.05, 2.0, true) },
        Case { name: "abs", run: |s| unary(s, |g, a| g.abs(a), 0.05, 2.0, true) },
        Case { name: "clamp_min", run: |s| unary(s, |g, a| g.clamp_min(a, 0.0), 0.05, 2.0, true) },
        Case { name: "normal_cdf", run: |s| unary(s, |g, a| g.normal_cdf(a), -4.0, 4.0, false) },
        Case {
            name: "prelu",
            run: |s| {
                let mut r = rng(s);
                let x = signed(&[3, 2, 3], 0.05, 2.0, &mut r);
                let a = uniform(&[3], 0.05, 0.5, &mut r);
                check_inputs(&[x, a], |g, v| g.prelu(v[0], v[1]), STEP)
            },
        },
        Case {
            name: "concat0_slice0",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&[2, 3], -1.0, 1.0, &mut r);
                let b = uniform(&[3, 3], -1.0, 1.0, &mut r);
                check_inputs(&[a, b], |g, v| {
                    let c = g.concat0(&[v[0], v[1]])?;
                    let d = g.slice0(c, 1, 3)?;
                    g.mul(d, d)
                }, STEP)
            },
        },
        Case {
            name: "reshape_sum_mean",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&[2, 6], -1.0, 1.0, &mut r);
                check_inputs(&[a], |g, v| {
                    let b = g.reshape(v[0], &[3, 4])?;
                    let sq = g.mul(b, b)?;
                    let m = g.mean(sq);
                    let t = g.tanh(v[0]);
                    let s = g.sum(t);
                    g.add(m, s)
                }, STEP)
            },
        },
        Case {
            name: "pad2d_crop2d",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
                check_inputs(&[a], |g, v| {
                    let p = g.pad2d(v[0], PadSpec { top: 1, bottom: 2, left: 0, right: 1 })?;
                    let e = g.exp(p);
                    g.crop2d(e, PadSpec { top: 0, bottom: 1, left: 1, right: 1 })
                }, STEP)
            },
        },
        Case {
            name: "broadcast_to",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&[2, 1, 3], -1.0, 1.0, &mut r);
                let b = uniform(&[2, 4, 3], -1.0, 1.0, &mut r);
                check_inputs(&[a, b], |g, v| {
                    let c = g.broadcast_to(v[0], &[2, 4, 3])?;
                    g.mul(c, v[1])
                }, STEP)
            },
        },
        Case {
            name: "conv2d",
            run: |s| {
                let mut r = rng(s);
                let stride = 1 + (s as usize % 2);
                let x = uniform(&[2, 7, 6], -1.0, 1.0, &mut r);
                let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
                let b = uniform(&[3], -1.0, 1.0, &mut r);
                check_inputs(&[x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, PadSpec { top: 1, bottom: 2, left: 1, right: 0 }), STEP)
            },
        },
        Case {
            name: "conv2d_transpose",
            run: |s| {
                let mut r = rng(s);
                let stride = 1 + (s as usize % 2);
                let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
                let w = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
                let b = uniform(&[3], -1.0, 1.0, &mut r);
                check_inputs(&[x, w, b], |g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), stride, PadSpec::transpose_same(5, stride)), STEP)
            },
        },
        Case {
            name: "conv3d_masked",
            run: |s| {
                let mut r = rng(s);
                let stack = [Stack::Channel, Stack::Vertical, Stack::Horizontal][s as usize % 3];
                let kind = if s % 2 == 0 { MaskType::A } else { MaskType::B };
                let m = build_masks(3, kind)?;
                let mask2 = gcmc_core::context::full_mask(&m[stack as usize], 2, 2);
                let x = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
                let w = uniform(&[2, 2, 3, 3, 3], -1.0, 1.0, &mut r);
                let b = uniform(&[2], -1.0, 1.0, &mut r);
                check_inputs(&[x, w, b], |g, v| g.conv3d_masked(v[0], v[1], &mask2, Some(v[2])), STEP)
            },
        },
        Case {
            name: "pointwise",
            run: |s| {
                let mut r = rng(s);
                let x = uniform(&[3, 2, 4], -1.0, 1.0, &mut r);
                let w = uniform(&[2, 3], -1.0, 1.0, &mut r);
                let b = uniform(&[2], -1.0, 1.0, &mut r);
                check_inputs(&[x, w, b], |g, v| g.pointwise(v[0], v[1], Some(v[2])), STEP)
            },
        },
        Case {
            name: "bmm",
            run: |s| {
                let mut r = rng(s);
                let a = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
                let b = uniform(&[2, 4, 2], -1.0, 1.0, &mut r);
                check_inputs(&[a, b], |g, v| g.bmm(v[0], v[1]), STEP)
            },
        },
    ]
}

fn layer_check(seed: u64, build: fn(&mut ParamStore, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Graph, &ParamStore, Var) -> Result<Var>>, x: Tensor) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = build(&mut store, &mut r);
    // Move every parameter off its initial (often symmetric) value.
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id).map(|v| v * r.gen_range(0.8..1.2) + r.gen_range(0.0..0.05));
        store.set(id, t)?;
    }
    store.project();
    let ids: Vec<ParamId> = store.ids().collect();
    let cs = coords(&store, &ids, 8, &mut r);
    let e_params = check_params(&store, &cs, |g, st| {
        let xv = g.constant(x.clone());
        layer(g, st, xv)
    }, STEP)?;
    let frozen = store.clone();
    let e_input = check_inputs(&[x.clone()], |g, v| layer(g, &frozen, v[0]), STEP)?;
    Ok(e_params.max(e_input))
}

fn image(seed: u64, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    let mut r = rng(seed ^ 0x55);
    uniform(&[c, h, w], lo, hi, &mut r)
}

fn layer_cases() -> Vec<Case> {
    vec![
        Case {
            name: "gdn",
            run: |s| layer_check(s, |st, _| {
                let l = Gdn::new(st, "gdn", 3, false);
                Box::new(move |g, st, x| l.forward(g, st, x))
            }, image(s, 3, 3, 4, -1.5, 1.5)),
        },
        Case {
            name: "igdn",
            run: |s| layer_check(s, |st, _| {
                let l = Gdn::new(st, "igdn", 3, true);
                Box::new(move |g, st, x| l.forward(g, st, x))
            }, image(s, 3, 3, 4, -1.5, 1.5)),
        },
        Case {
            name: "prelu_layer",
            run: |s| {
                let mut r = rng(s ^ 0x77);
                layer_check(s, |st, _| {
                    let l = Prelu::new(st, "prelu", 3);
                    Box::new(move |g, st, x| l.forward(g, st, x))
                }, signed(&[3, 3, 3], 0.05, 1.5, &mut r))
            },
        },
        Case {
            name: "conv_layer",
            run: |s| layer_check(s, |st, r| {
                let l = Conv2d::new(st, "conv", 2, 3, 5, 2, r);
                Box::new(move |g, st, x| l.forward(g, st, x))
            }, image(s, 2, 8, 6, -1.0, 1.0)),
        },
        Case {
            name: "conv_transpose_layer",
            run: |s| layer_check(s, |st, r| {
                let l = ConvTranspose2d::new(st, "deconv", 2, 3, 5, 2, r);
                Box::new(move |g, st, x| l.forward(g, st, x))
            }, image(s, 2, 3, 3, -1.0, 1.0)),
        },
        Case {
            name: "resblock_gdn",
            run: |s| layer_check(s, |st, r| {
                let l = ResBlock::new(st, "res", 2, ActivationKind::Gdn, false, ResBlockLayout::ActivationFirst, true, r);
                Box::new(move |g, st, x| l.forward(g, st, x))
            }, image(s, 2, 4, 4, -1.0, 1.0)),
        },
        Case {
            name: "resblock_igdn",
            run: |s| layer_check(s, |st, r| {
                let l = ResBlock::new(st, "res", 2, ActivationKind::Gdn, true, ResBlockLayout::ConvFirst, true, r);
                Box::new(move |g, st, x| l.forward(g, st, x))
            }, image(s, 2, 4, 4, -1.0, 1.0)),
        },
    ]
}

fn context_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = ContextConfig { gate_width: 4, ..ContextConfig::default() };
    let model = ContextModel::new(&mut store, "ctx", cfg, &mut r)?;
    let (m, h, w) = (2, 3, 3);
    let y = uniform(&[m, h, w], -2.0, 2.0, &mut r);
    let zp = uniform(&[2 * m, h, w], -1.0, 1.0, &mut r);
    let joint = |g: &mut Graph, st: &ParamStore, y: Var, zp: Var| -> Result<Var> {
        let (mu, sigma) = model.forward(g, st, y, zp)?;
        g.concat0(&[mu, sigma])
    };
    let ids = model.param_ids();
    let cs = coords(&store, &ids, 4, &mut r);
    let e_params = check_params(&store, &cs, |g, st| {
        let (yv, zv) = (g.constant(y.clone()), g.constant(zp.clone()));
        joint(g, st, yv, zv)
    }, STEP)?;
    let e_inputs = check_inputs(&[y.clone(), zp.clone()], |g, v| joint(g, &store, v[0], v[1]), STEP)?;
    Ok(e_params.max(e_inputs))
}

fn gaussian_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let y = uniform(&[2, 3, 3], -3.0, 3.0, &mut r);
    let mu = uniform(&[2, 3, 3], -2.0, 2.0, &mut r);
    let sigma = uniform(&[2, 3, 3], 0.2, 3.0, &mut r);
    check_inputs(&[y, mu, sigma], |g, v| {
        let p = entropy::gaussian_likelihood_graph(g, v[0], v[1], v[2])?;
        Ok(entropy::bits_graph(g, p))
    }, STEP)
}

fn factorized_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let density = FactorizedDensity::new(&mut store, "fact", 2);
    for id in density.param_ids() {
        let t = store.get(id).map(|v| v + r.gen_range(-0.3..0.3));
        store.set(id, t)?;
    }
    let z = uniform(&[2, 2, 3], -4.0, 4.0, &mut r);
    let ids = density.param_ids();
    let cs = coords(&store, &ids, 6, &mut r);
    let e_params = check_params(&store, &cs, |g, st| {
        let zv = g.constant(z.clone());
        let p = density.likelihood(g, st, zv)?;
        Ok(entropy::bits_graph(g, p))
    }, STEP)?;
    let e_input = check_inputs(&[z.clone()], |g, v| {
        let p = density.likelihood(g, &store, v[0])?;
        Ok(entropy::bits_graph(g, p))
    }, STEP)?;
    Ok(e_params.max(e_input))
}

fn ms_ssim_case(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = uniform(&[1, 24, 24], 0.0, 1.0, &mut r);
    let y = x.map(|v| (v + r_noise(v, seed)).clamp(0.0, 1.0));
    check_inputs(&[x, y], |g, v| metrics::ms_ssim_graph(g, v[0], v[1], &MsSsimConfig::default()), STEP)
}

/// Deterministic pseudo-noise keyed on the value itself.
fn r_noise(v: f64, seed: u64) -> f64 {
    0.15 * libm::sin(v * 977.0 + seed as f64)
}

fn tiny_model(seed: u64) -> Result<CodecModel> {
    let mut r = rng(seed);
    let cfg = ModelConfig { n: 8, m: 4, context: ContextConfig { gate_width: 4, ..ContextConfig::default() }, ..ModelConfig::desk() };
    CodecModel::new(cfg, &mut r)
}

fn icn_case(seed: u64) -> Result<f64> {
    let model = tiny_model(seed)?;
    let mut r = rng(seed ^ 0x1c);
    let zp = uniform(&[model.config.zp_channels(), 3, 3], -1.0, 1.0, &mut r);
    let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.name(id).starts_with("icn.")).collect();
    let cs = coords(&model.store, &ids, 3, &mut r);
    let e_params = check_params(&model.store, &cs, |g, st| {
        let mut m = model.clone();
        m.store = st.clone();
        let z = g.constant(zp.clone());
        m.compensation(g, z)
    }, STEP)?;
    let e_input = check_inputs(&[zp.clone()], |g, v| model.compensation(g, v[0]), STEP)?;
    Ok(e_params.max(e_input))
}

/// End-to-end loss `λ(1 − d) + R` through every network, checked on a
/// sample of parameter coordinates.
pub fn pipeline_case(seed: u64) -> Result<f64> {
    let model = tiny_model(seed)?;
    let mut r = rng(seed ^ 0xfe);
    let x = Tensor::from_fn(&[3, 64, 64], |i| 0.5 + 0.4 * libm::sin(i as f64 * 0.013 + seed as f64) * libm::cos(i as f64 * 0.0007));
    let ids: Vec<ParamId> = model.store.ids().collect();
    let cs = coords(&model.store, &ids, 1, &mut r);
    let cs: Vec<_> = cs.into_iter().filter(|_| r.gen_bool(0.5)).collect();
    check_params(&model.store, &cs, |g, st| {
        let mut m = model.clone();
        m.store = st.clone();
        let xv = g.constant(x.clone());
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        let f = m.forward_train(g, xv, Quantizer::Noise(&mut noise))?;
        let rate = g.add(f.rate_y, f.rate_z)?;
        let bpp = g.scale(rate, 1.0 / 4096.0);
        let d = metrics::ms_ssim_graph(g, xv, f.x_hat, &MsSsimConfig::default())?;
        let dist = g.scale(d, -32.0);
        let l = g.add(dist, bpp)?;
        Ok(g.add_scalar(l, 32.0))
    }, STEP)
}

pub fn cases() -> Vec<Case> {
    let mut v = op_cases();
    v.extend(layer_cases());
    v.push(Case { name: "context_model", run: context_case });
    v.push(Case { name: "gaussian_likelihood", run: gaussian_case });
    v.push(Case { name: "factorized_likelihood", run: factorized_case });
    v.push(Case { name: "ms_ssim", run: ms_ssim_case });
    v.push(Case { name: "compensation", run: icn_case });
    v
}

/// Worst error of each case over `SEEDS` seeds.
pub fn run_all() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|c| {
            let worst = (0..SEEDS)
                .map(|s| (c.run)(s).unwrap_or_else(|e| panic!("{}: {e}", c.name)))
                .fold(0.0f64, f64::max);
            (c.name, worst)
        })
        .collect()
}
