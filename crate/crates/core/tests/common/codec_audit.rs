//! Roundtrip exactness, determinism, corruption handling and rate fidelity
//! of a codec model over a set of images.
#![allow(dead_code)]

use gcmc_core::codec::CodecModel;
use gcmc_core::{Error, Result, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct CodecReport {
    pub images: usize,
    /// Images whose decoded `ŷ` or `ẑ` differ from the encoder's.
    pub latent_mismatches: usize,
    /// Images where repeated compression or decompression changed a bit.
    pub nondeterministic: usize,
    /// Damaged streams that decoded without an error.
    pub corrupt_accepted: usize,
    pub corrupt_trials: usize,
    /// `(file bytes, estimated bytes)` per image.
    pub rates: Vec<(usize, f64)>,
}

impl CodecReport {
    /// Images whose file size exceeds `1% + 32` bytes over or under the
    /// estimate.
    pub fn rate_violations(&self) -> usize {
        self.rates.iter().filter(|(a, e)| (*a as f64 - e).abs() > 0.01 * e + 32.0).count()
    }
}

fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Damaged variants of `bytes`: truncations and single-bit flips.
pub fn damaged(bytes: &[u8], seed: u64) -> Vec<Vec<u8>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for cut in [0, 1, 4, 21, bytes.len() / 2, bytes.len().saturating_sub(2), bytes.len() - 1] {
        if cut < bytes.len() {
            out.push(bytes[..cut].to_vec());
        }
    }
    for _ in 0..8 {
        let mut b = bytes.to_vec();
        let i = r.gen_range(0..b.len());
        b[i] ^= 1 << r.gen_range(0..8);
        out.push(b);
    }
    let mut extended = bytes.to_vec();
    extended.push(0x5a);
    out.push(extended);
    out
}

pub fn audit(model: &CodecModel, images: &[Tensor], lambda_index: u8) -> Result<CodecReport> {
    let mut rep = CodecReport::default();
    for (k, x) in images.iter().enumerate() {
        let c = model.compress(x, lambda_index)?;
        let again = model.compress(x, lambda_index)?;
        let d = model.decompress(&c.bytes)?;
        let d2 = model.decompress(&c.bytes)?;
        let direct = model.reconstruct(&c.y_hat, &c.z_hat, x.dim(1), x.dim(2))?;
        rep.images += 1;
        if !(bitwise_eq(&d.y_hat, &c.y_hat) && bitwise_eq(&d.z_hat, &c.z_hat)) {
            rep.latent_mismatches += 1;
        }
        if c.bytes != again.bytes || !bitwise_eq(&d.image, &d2.image) || !bitwise_eq(&d.image, &direct) || d.image.shape() != x.shape() {
            rep.nondeterministic += 1;
        }
        rep.rates.push((c.bytes.len(), c.estimated_bits / 8.0));
        for bad in damaged(&c.bytes, k as u64) {
            rep.corrupt_trials += 1;
            match model.decompress(&bad) {
                Err(Error::CorruptStream(_)) => {}
                _ => rep.corrupt_accepted += 1,
            }
        }
    }
    Ok(rep)
}
