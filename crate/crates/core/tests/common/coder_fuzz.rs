//! Randomized range-coder roundtrips.
#![allow(dead_code)]

use gcmc_core::rangecoder::{QuantizedCdf, RangeDecoder, RangeEncoder, ESCAPE, LATENT_SYMBOLS, V_MAX, V_MIN};
use gcmc_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub symbols: usize,
    pub streams: usize,
    pub bytes: usize,
    /// Sum of `−log₂` of the table probabilities of every coded symbol.
    pub table_bits: f64,
    pub mismatches: usize,
}

#[derive(Clone, Copy, Debug)]
enum Item {
    Symbol(usize, usize),
    Raw(u16),
    Latent(usize, i32),
}

fn random_table(r: &mut ChaCha8Rng) -> QuantizedCdf {
    let n = match r.gen_range(0..5) {
        0 => 2,
        1 => r.gen_range(3..16),
        2 => r.gen_range(16..300),
        3 => LATENT_SYMBOLS,
        _ => r.gen_range(300..4000),
    };
    // Skewness from near-uniform to extremely peaked.
    let power: f64 = r.gen_range(0.0..6.0);
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(1e-6..1.0f64).powf(power)).collect();
    let total: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    QuantizedCdf::from_probabilities(&p).expect("valid table")
}

fn sample(cdf: &QuantizedCdf, r: &mut ChaCha8Rng) -> usize {
    cdf.find(r.gen_range(0..65536))
}

/// Codes streams of random items until `total` symbols have been
/// round-tripped.
pub fn fuzz(total: usize, seed: u64) -> Result<FuzzReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = FuzzReport::default();
    while rep.symbols < total {
        let tables: Vec<QuantizedCdf> = (0..r.gen_range(1..6)).map(|_| random_table(&mut r)).collect();
        let latent: Vec<usize> = (0..tables.len()).filter(|&i| tables[i].symbols() == LATENT_SYMBOLS).collect();
        let len = r.gen_range(1..40_000).min(total - rep.symbols);
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            let t = r.gen_range(0..tables.len());
            let roll = r.gen_range(0..100);
            items.push(if roll < 2 {
                Item::Raw(r.gen())
            } else if roll < 6 && !latent.is_empty() {
                let t = latent[r.gen_range(0..latent.len())];
                let v = if r.gen_bool(0.5) { r.gen_range(V_MIN..=V_MAX) } else { r.gen::<i32>() };
                Item::Latent(t, v)
            } else {
                Item::Symbol(t, sample(&tables[t], &mut r))
            });
        }
        let mut enc = RangeEncoder::new();
        for it in &items {
            match *it {
                Item::Symbol(t, s) => {
                    enc.encode_symbol(&tables[t], s)?;
                    rep.table_bits += tables[t].bits(s);
                }
                Item::Raw(v) => {
                    enc.encode_raw16(v)?;
                    rep.table_bits += 16.0;
                }
                Item::Latent(t, v) => {
                    enc.encode_latent(&tables[t], v)?;
                    rep.table_bits += if (V_MIN..=V_MAX).contains(&v) {
                        tables[t].bits((v - V_MIN) as usize)
                    } else {
                        tables[t].bits(ESCAPE) + 32.0
                    };
                }
            }
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes)?;
        for it in &items {
            let ok = match *it {
                Item::Symbol(t, s) => dec.decode_symbol(&tables[t])? == s,
                Item::Raw(v) => dec.decode_raw16()? == v,
                Item::Latent(t, v) => dec.decode_latent(&tables[t])? == v,
            };
            rep.mismatches += (!ok) as usize;
        }
        rep.symbols += items.len();
        rep.streams += 1;
        rep.bytes += bytes.len();
    }
    Ok(rep)
}

/// Bytes used to code `n` fair coin flips.
pub fn coin_flip_bytes(n: usize, seed: u64) -> Result<(usize, bool)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cdf = QuantizedCdf::from_frequencies(&[32768, 32768])?;
    let flips: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
    let mut enc = RangeEncoder::new();
    for &f in &flips {
        enc.encode_symbol(&cdf, f)?;
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes)?;
    let mut ok = true;
    for &f in &flips {
        ok &= dec.decode_symbol(&cdf)? == f;
    }
    Ok((bytes.len(), ok))
}
