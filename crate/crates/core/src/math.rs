//! Scalar math on top of `libm`, so results are identical on every target.

pub use libm::{erfc, exp, expm1, floor, log, log10, log1p, log2, pow, sqrt, tanh};

pub const SQRT_2: f64 = core::f64::consts::SQRT_2;

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + log1p(exp(-x))
    } else {
        log1p(exp(x))
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + log(-expm1(-y))
    } else {
        log(expm1(y))
    }
}

/// Standard normal CDF, `Φ(t) = erfc(-t/√2)/2`.
#[inline]
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(t: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * exp(-0.5 * t * t)
}

/// Rounds half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}
