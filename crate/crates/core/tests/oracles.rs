mod common;

use common::*;
use gcmc_core::autodiff::kernels;
use gcmc_core::autodiff::Graph;
use gcmc_core::codec::{lambda_index, LAMBDA_PRESETS};
use gcmc_core::context::{build_masks, full_mask, MaskType};
use gcmc_core::entropy::{gaussian_likelihood, gaussian_mass, likelihood_y, noisy_quantize, FactorizedDensity, LIKELIHOOD_FLOOR};
use gcmc_core::metrics::{self, msssim_db, MsSsimConfig};
use gcmc_core::params::ParamStore;
use gcmc_core::tensor::PadSpec;
use gcmc_core::Tensor;
use rand::Rng;

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng(1);
    for trial in 0..12 {
        let stride = 1 + trial % 2;
        let (kh, kw) = [(1, 1), (3, 3), (5, 5), (3, 5)][trial % 4];
        let pad = PadSpec { top: trial % 3, bottom: (trial + 1) % 3, left: (trial / 2) % 3, right: trial % 2 };
        let x = random(&[2 + trial % 2, 7 + trial, 9], -1.0, 1.0, &mut r);
        let k = random(&[3, x.dim(0), kh, kw], -1.0, 1.0, &mut r);
        let fast = kernels::conv2d(&x, &k, None, stride, pad).unwrap();
        let slow = conv2d_loops(&x, &k, stride, (pad.top, pad.bottom, pad.left, pad.right));
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "trial {trial}");
    }
}

#[test]
fn conv2d_transpose_matches_stamping() {
    let mut r = rng(2);
    for stride in [1, 2] {
        for k in [3, 5] {
            let x = random(&[3, 4, 5], -1.0, 1.0, &mut r);
            let w = random(&[3, 2, k, k], -1.0, 1.0, &mut r);
            let crop = PadSpec::transpose_same(k, stride);
            let fast = kernels::conv2d_transpose(&x, &w, None, stride, crop).unwrap();
            let slow = conv2d_transpose_loops(&x, &w, stride, (crop.top, crop.bottom, crop.left, crop.right));
            assert_eq!(fast.shape(), slow.shape());
            assert_eq!(fast.shape(), &[2, 4 * stride, 5 * stride]);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }
}

#[test]
fn transpose_is_the_adjoint_of_convolution() {
    let mut r = rng(3);
    for stride in [1, 2] {
        let k = 5;
        let pad = PadSpec::same(k);
        let x = random(&[2, 8, 8], -1.0, 1.0, &mut r);
        let w = random(&[3, 2, k, k], -1.0, 1.0, &mut r);
        let ax = kernels::conv2d(&x, &w, None, stride, pad).unwrap();
        let y = random(ax.shape(), -1.0, 1.0, &mut r);
        let aty = kernels::conv2d_transpose(&y, &w, None, stride, PadSpec::transpose_same(k, stride)).unwrap();
        assert_eq!(aty.shape(), x.shape());
        let lhs = ax.dot(&y).unwrap();
        let rhs = x.dot(&aty).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn masked_conv3d_matches_direct_loops() {
    let mut r = rng(4);
    for kind in [MaskType::A, MaskType::B] {
        for (s, m) in build_masks(3, kind).unwrap().iter().enumerate() {
            let x = random(&[2, 3, 4, 5], -1.0, 1.0, &mut r);
            let w = random(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut r);
            let mask = full_mask(m, 3, 2);
            let fast = kernels::conv3d_masked(&x, &w, &mask, None).unwrap();
            let slow = conv3d_masked_loops(&x, &w, &mask);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{kind:?} stack {s}");
        }
    }
}

#[test]
fn stacked_convolutions_compose() {
    let mut r = rng(5);
    let x = random(&[2, 9, 9], -1.0, 1.0, &mut r);
    let a = random(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = random(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
    let fast = kernels::conv2d(&kernels::conv2d(&x, &a, None, 1, PadSpec::same(3)).unwrap(), &b, None, 2, PadSpec::same(3)).unwrap();
    let mid = conv2d_loops(&x, &a, 1, (1, 1, 1, 1));
    let slow = conv2d_loops(&mid, &b, 2, (1, 1, 1, 1));
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
}

#[test]
fn unit_gaussian_mass_at_zero_matches_erf_series() {
    let reference = 2.0 * phi_series(0.5) - 1.0;
    assert!((reference - 0.3829249).abs() < 1e-6);
    let p = gaussian_likelihood(0.0, 0.0, 1.0);
    assert!((p - 0.3829249).abs() < 1e-6, "{p}");
    assert!((p - reference).abs() < 1e-14);
    let t = likelihood_y(&Tensor::zeros(&[1]), &Tensor::zeros(&[1]), &Tensor::full(&[1], 1.0)).unwrap();
    assert!((t.data()[0] - 0.3829249).abs() < 1e-6);
}

#[test]
fn gaussian_mass_matches_series_oracle() {
    let mut r = rng(6);
    for _ in 0..200 {
        let mu: f64 = r.gen_range(-3.0..3.0);
        let sigma: f64 = r.gen_range(0.6..4.0);
        let y = (mu + r.gen_range(-2.0..2.0) * sigma).round();
        let oracle = phi_series((y + 0.5 - mu) / sigma) - phi_series((y - 0.5 - mu) / sigma);
        assert!((gaussian_mass(y, mu, sigma) - oracle).abs() < 1e-12);
    }
}

#[test]
fn gaussian_masses_sum_to_one() {
    let mut r = rng(7);
    for _ in 0..100 {
        let mu: f64 = r.gen_range(-20.0..20.0);
        let sigma = libm::exp(r.gen_range(libm::log(0.01)..libm::log(64.0)));
        let span = (40.0 * sigma + 50.0) as i64;
        let c = mu.round() as i64;
        let total: f64 = (c - span..=c + span).map(|v| gaussian_mass(v as f64, mu, sigma)).sum();
        assert!((total - 1.0).abs() < 1e-9, "mu {mu} sigma {sigma}: {total}");
    }
}

#[test]
fn floored_likelihood_never_drops_below_floor() {
    for y in [-500.0, -30.0, 30.0, 500.0] {
        assert_eq!(gaussian_likelihood(y, 0.0, 0.5), LIKELIHOOD_FLOOR);
    }
}

#[test]
fn factorized_masses_sum_to_one() {
    let mut store = ParamStore::new();
    let density = FactorizedDensity::new(&mut store, "f", 3);
    let mut r = rng(8);
    for id in density.param_ids() {
        let t = store.get(id).map(|v| v + r.gen_range(-0.5..0.5));
        store.set(id, t).unwrap();
    }
    let eval = density.eval(&store);
    for c in 0..3 {
        let total: f64 = (-2000..=2000).map(|v| eval.mass(c, v as f64)).sum();
        assert!((total - 1.0).abs() < 1e-9, "channel {c}: {total}");
        let mut prev = 0.0;
        for v in -50..50 {
            let cdf = eval.cdf(c, v as f64 + 0.5);
            assert!(cdf >= prev);
            prev = cdf;
        }
    }
}

#[test]
fn additive_noise_is_centred_and_bounded() {
    let mut r = rng(9);
    let y = random(&[200_000], -10.0, 10.0, &mut r);
    let n = noisy_quantize(&y, &mut r);
    let diffs: Vec<f64> = n.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
    assert!(diffs.iter().all(|d| (-0.5..0.5).contains(d)));
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
    // Standard error of the mean is sqrt(1/12 / 2e5) ≈ 6.5e-4.
    assert!(mean.abs() < 3e-3, "{mean}");
    assert!((var - 1.0 / 12.0).abs() < 2e-3, "{var}");
}

fn pair(seed: u64, h: usize, w: usize) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let x = smooth_image(h, w, &mut r);
    let amount = r.gen_range(0.02..0.3);
    let y = x.map(|v| (v + r.gen_range(-amount..amount)).clamp(0.0, 1.0));
    (x, y)
}

#[test]
fn ms_ssim_matches_scalar_reference() {
    for seed in 0..10 {
        let (h, w) = [(64, 64), (48, 80), (96, 64)][seed as usize % 3];
        let (x, y) = pair(100 + seed, h, w);
        let fast = metrics::ms_ssim(&x, &y).unwrap();
        let slow = ms_ssim_scalar(&x, &y);
        assert!((fast - slow).abs() < 1e-6, "seed {seed}: {fast} vs {slow}");
    }
}

#[test]
fn ms_ssim_uses_all_five_scales_when_large_enough() {
    let (x, y) = pair(11, 176, 176);
    assert_eq!(MsSsimConfig::default().effective_weights(176, 176).unwrap().len(), 5);
    let fast = metrics::ms_ssim(&x, &y).unwrap();
    assert!((fast - ms_ssim_scalar(&x, &y)).abs() < 1e-6);
}

#[test]
fn ssim_matches_scalar_reference() {
    for seed in 0..5 {
        let (x, y) = pair(200 + seed, 32, 40);
        let fast = metrics::ssim(&x, &y).unwrap();
        assert!((fast - ssim_scalar(&x, &y)).abs() < 1e-6);
    }
}

#[test]
fn identical_images_score_exactly_one() {
    for seed in 0..5 {
        let (x, _) = pair(300 + seed, 64, 64);
        assert_eq!(metrics::ms_ssim(&x, &x).unwrap(), 1.0);
        assert_eq!(metrics::psnr(&x, &x).unwrap(), f64::INFINITY);
    }
}

#[test]
fn ms_ssim_gradient_vanishes_at_identity() {
    let (x, _) = pair(400, 64, 64);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.variable(x.clone());
    let d = metrics::ms_ssim_graph(&mut g, xv, yv, &MsSsimConfig::default()).unwrap();
    g.backward(d).unwrap();
    let grad = g.grad(yv).unwrap();
    let worst = grad.data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn metrics_are_symmetric() {
    for seed in 0..5 {
        let (x, y) = pair(500 + seed, 64, 64);
        assert_eq!(metrics::mse(&x, &y).unwrap(), metrics::mse(&y, &x).unwrap());
        assert_eq!(metrics::psnr(&x, &y).unwrap(), metrics::psnr(&y, &x).unwrap());
        assert!((metrics::ssim(&x, &y).unwrap() - metrics::ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!((metrics::ms_ssim(&x, &y).unwrap() - metrics::ms_ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(metrics::ms_ssim(&x, &y).unwrap() < 1.0);
    }
}

#[test]
fn decibel_and_offset_examples() {
    assert!((msssim_db(0.9) - 10.0).abs() < 1e-12);
    assert!((msssim_db(0.99) - 20.0).abs() < 1e-12);
    assert_eq!(msssim_db(0.0), 0.0);
    assert_eq!(msssim_db(1.0), f64::INFINITY);
    let x = Tensor::full(&[3, 16, 16], 0.4);
    let y = Tensor::full(&[3, 16, 16], 0.5);
    assert!((metrics::mse(&x, &y).unwrap() - 0.01).abs() < 1e-15);
    assert!((metrics::psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn lambda_presets() {
    assert_eq!(LAMBDA_PRESETS, [2.0, 8.0, 32.0, 128.0, 384.0]);
    for (i, l) in LAMBDA_PRESETS.iter().enumerate() {
        assert_eq!(lambda_index(*l) as usize, i);
    }
}
