//! 32-bit carry-less range coder over 16-bit frequency tables, plus the
//! quantized CDF tables used for the latents.
//!
//! Renormalization follows the classic carry-less scheme: a byte is shifted
//! out whenever the top byte of `low` and `low + range` agree, and when the
//! range underflows `2¹⁶` it is forcibly shrunk to the next `2¹⁶` boundary.
//! The encoder flushes two bytes; the decoder treats reads past the end as
//! zero bytes and reports a corrupt stream if more than two are needed.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;
const FLUSH_BYTES: usize = 2;

/// Smallest latent symbol coded without escape.
pub const V_MIN: i32 = -127;
/// Largest latent symbol coded without escape.
pub const V_MAX: i32 = 127;
/// Index of the escape symbol in latent tables.
pub const ESCAPE: usize = (V_MAX - V_MIN + 1) as usize;
/// Latent alphabet size including the escape symbol.
pub const LATENT_SYMBOLS: usize = ESCAPE + 1;

/// Cumulative frequency table: `cum[0] = 0`, `cum[n] = 2¹⁶`, every symbol
/// width at least one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    pub fn from_frequencies(freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.len() > TOTAL as usize {
            return Err(Error::invalid(format!("alphabet size {} outside 1..=65536", freqs.len())));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u32;
        for &f in freqs {
            if f == 0 {
                return Err(Error::invalid("zero-width symbol"));
            }
            acc = acc.checked_add(f).ok_or_else(|| Error::invalid("frequency overflow"))?;
            cum.push(acc);
        }
        if acc != TOTAL {
            return Err(Error::invalid(format!("frequencies sum to {acc}, expected {TOTAL}")));
        }
        Ok(QuantizedCdf { cum })
    }

    /// `freq_i = 1 + ⌊p_i (2¹⁶ − n)⌋`; the leftover goes to the most probable
    /// symbol. `p` must be nonnegative with sum at most one.
    pub fn from_probabilities(p: &[f64]) -> Result<Self> {
        let n = p.len();
        if n == 0 || n > TOTAL as usize {
            return Err(Error::invalid(format!("alphabet size {n} outside 1..=65536")));
        }
        let spare = (TOTAL - n as u32) as f64;
        let mut freqs = Vec::with_capacity(n);
        let mut total = 0u32;
        let mut best = 0;
        for (i, &pi) in p.iter().enumerate() {
            if !(pi >= 0.0) || pi > 1.0 {
                return Err(Error::invalid(format!("probability {pi} outside [0, 1]")));
            }
            let f = 1 + math::floor(pi * spare) as u32;
            total += f;
            if pi > p[best] {
                best = i;
            }
            freqs.push(f);
        }
        if total > TOTAL {
            return Err(Error::invalid("probabilities sum above one"));
        }
        freqs[best] += TOTAL - total;
        Self::from_frequencies(&freqs)
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    #[inline]
    pub fn range_of(&self, s: usize) -> (u32, u32) {
        (self.cum[s], self.cum[s + 1] - self.cum[s])
    }

    /// Symbol whose interval contains `f`.
    #[inline]
    pub fn find(&self, f: u32) -> usize {
        // last index with cum[i] <= f
        self.cum.partition_point(|&c| c <= f) - 1
    }

    /// Cost of symbol `s` in bits under this table.
    pub fn bits(&self, s: usize) -> f64 {
        let (_, f) = self.range_of(s);
        PRECISION as f64 - math::log2(f as f64)
    }
}

#[derive(Clone, Debug)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2¹⁶`.
    pub fn encode(&mut self, cum: u32, freq: u32) -> Result<()> {
        if freq == 0 || cum.checked_add(freq).is_none_or(|e| e > TOTAL) {
            return Err(Error::invalid(format!("invalid interval [{cum}, +{freq})")));
        }
        self.range >>= PRECISION;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn encode_symbol(&mut self, cdf: &QuantizedCdf, s: usize) -> Result<()> {
        if s >= cdf.symbols() {
            return Err(Error::invalid(format!("symbol {s} outside alphabet of {}", cdf.symbols())));
        }
        let (c, f) = cdf.range_of(s);
        self.encode(c, f)
    }

    /// Codes 16 raw bits with a uniform distribution.
    pub fn encode_raw16(&mut self, v: u16) -> Result<()> {
        self.encode(v as u32, 1)
    }

    /// Codes a latent value, escaping to a raw 32-bit word outside
    /// `[V_MIN, V_MAX]`.
    pub fn encode_latent(&mut self, cdf: &QuantizedCdf, v: i32) -> Result<()> {
        if (V_MIN..=V_MAX).contains(&v) {
            self.encode_symbol(cdf, (v - V_MIN) as usize)
        } else {
            self.encode_symbol(cdf, ESCAPE)?;
            let w = v as u32;
            self.encode_raw16((w >> 16) as u16)?;
            self.encode_raw16(w as u16)
        }
    }

    /// Bytes emitted so far, excluding the flush.
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }

    pub fn finish(mut self) -> Vec<u8> {
        // low + range never wraps, so rounding low up to a multiple of 2¹⁶
        // stays inside the final interval
        let v = self.low.wrapping_add(BOT - 1) & !(BOT - 1);
        self.out.push((v >> 24) as u8);
        self.out.push((v >> 16) as u8);
        self.out
    }
}

#[derive(Clone, Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    low: u32,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            low: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            let b = d.byte()?;
            d.code = (d.code << 8) | b as u32;
        }
        Ok(d)
    }

    fn byte(&mut self) -> Result<u8> {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        if self.pos > self.data.len() + FLUSH_BYTES {
            return Err(Error::corrupt("stream truncated"));
        }
        Ok(b)
    }

    /// Frequency slot of the next symbol; must be followed by [`Self::consume`].
    pub fn peek(&mut self) -> Result<u32> {
        self.range >>= PRECISION;
        let f = self.code.wrapping_sub(self.low) / self.range;
        if f >= TOTAL {
            return Err(Error::corrupt("cumulative frequency out of range"));
        }
        Ok(f)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            let b = self.byte()?;
            self.code = (self.code << 8) | b as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_symbol(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let f = self.peek()?;
        let s = cdf.find(f);
        if s >= cdf.symbols() {
            return Err(Error::corrupt("symbol outside table"));
        }
        let (c, w) = cdf.range_of(s);
        self.consume(c, w)?;
        Ok(s)
    }

    pub fn decode_raw16(&mut self) -> Result<u16> {
        let f = self.peek()?;
        self.consume(f, 1)?;
        Ok(f as u16)
    }

    pub fn decode_latent(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        let s = self.decode_symbol(cdf)?;
        if s == ESCAPE {
            let hi = self.decode_raw16()? as u32;
            let lo = self.decode_raw16()? as u32;
            let v = ((hi << 16) | lo) as i32;
            if (V_MIN..=V_MAX).contains(&v) {
                return Err(Error::corrupt("escape used for in-range value"));
            }
            Ok(v)
        } else if s < ESCAPE {
            Ok(s as i32 + V_MIN)
        } else {
            Err(Error::corrupt("symbol outside latent alphabet"))
        }
    }

    /// Bytes consumed, including the phantom flush padding.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Number of entries in the σ snapping table.
pub const SIGMA_LEVELS: usize = 64;
/// Largest σ in the snapping table.
pub const SIGMA_MAX: f64 = 64.0;
/// μ is snapped to multiples of `1 / MU_STEPS`.
pub const MU_STEPS: f64 = 64.0;

/// `σ_k = σ_min (σ_max/σ_min)^{k/63}` with both endpoints exact.
pub fn sigma_table() -> [f64; SIGMA_LEVELS] {
    let lo = crate::entropy::SIGMA_MIN;
    let mut t = [0.0; SIGMA_LEVELS];
    let ratio = math::log(SIGMA_MAX / lo);
    for (k, v) in t.iter_mut().enumerate() {
        *v = lo * math::exp(ratio * k as f64 / (SIGMA_LEVELS - 1) as f64);
    }
    t[0] = lo;
    t[SIGMA_LEVELS - 1] = SIGMA_MAX;
    t
}

/// Nearest σ table index in the log domain.
pub fn snap_sigma_index(sigma: f64) -> usize {
    let lo = crate::entropy::SIGMA_MIN;
    if !(sigma > lo) {
        return 0;
    }
    let k = math::round_half_away(math::log(sigma / lo) / math::log(SIGMA_MAX / lo) * (SIGMA_LEVELS - 1) as f64);
    (k.max(0.0) as usize).min(SIGMA_LEVELS - 1)
}

/// μ rounded to the `1/64` grid, as an integer number of grid steps.
pub fn snap_mu_steps(mu: f64) -> i64 {
    math::round_half_away(mu * MU_STEPS) as i64
}

/// Snapped `(μ, σ)` exactly as the coder sees them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GaussianKey {
    pub mu_steps: i64,
    pub sigma_index: usize,
}

impl GaussianKey {
    pub fn snap(mu: f64, sigma: f64) -> Self {
        GaussianKey {
            mu_steps: snap_mu_steps(mu),
            sigma_index: snap_sigma_index(sigma),
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu_steps as f64 / MU_STEPS
    }

    pub fn sigma(&self, table: &[f64; SIGMA_LEVELS]) -> f64 {
        table[self.sigma_index]
    }
}

/// Latent table for a snapped Gaussian: masses over `[V_MIN, V_MAX]` plus an
/// escape symbol with zero mass (so it gets the minimum width).
pub fn gaussian_cdf(key: GaussianKey, table: &[f64; SIGMA_LEVELS]) -> Result<QuantizedCdf> {
    let (mu, sigma) = (key.mu(), key.sigma(table));
    let mut p = [0.0f64; LATENT_SYMBOLS];
    for (i, pi) in p.iter_mut().take(ESCAPE).enumerate() {
        *pi = crate::entropy::gaussian_mass((V_MIN + i as i32) as f64, mu, sigma);
    }
    QuantizedCdf::from_probabilities(&p)
}

/// Latent table from an arbitrary mass function over `[V_MIN, V_MAX]`.
pub fn latent_cdf(mass: impl Fn(i32) -> f64) -> Result<QuantizedCdf> {
    let mut p = [0.0f64; LATENT_SYMBOLS];
    for (i, pi) in p.iter_mut().take(ESCAPE).enumerate() {
        *pi = mass(V_MIN + i as i32);
    }
    QuantizedCdf::from_probabilities(&p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_stream_is_flush_only() {
        assert_eq!(RangeEncoder::new().finish(), vec![0, 0]);
    }

    #[test]
    fn sigma_table_endpoints() {
        let t = sigma_table();
        assert_eq!(t[0], crate::entropy::SIGMA_MIN);
        assert_eq!(t[SIGMA_LEVELS - 1], SIGMA_MAX);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(snap_sigma_index(1e-5), 0);
        assert_eq!(snap_sigma_index(1e5), SIGMA_LEVELS - 1);
        for (k, &s) in t.iter().enumerate() {
            assert_eq!(snap_sigma_index(s), k);
        }
    }

    #[test]
    fn mu_grid() {
        assert_eq!(snap_mu_steps(0.25), snap_mu_steps(0.25 + 1.0 / 129.0));
        assert_eq!(snap_mu_steps(-1.0), -64);
    }

    #[test]
    fn find_matches_intervals() {
        let cdf = QuantizedCdf::from_frequencies(&[1, 65534, 1]).unwrap();
        assert_eq!(cdf.find(0), 0);
        assert_eq!(cdf.find(1), 1);
        assert_eq!(cdf.find(65534), 1);
        assert_eq!(cdf.find(65535), 2);
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(QuantizedCdf::from_frequencies(&[0, 65536]).is_err());
        assert!(QuantizedCdf::from_frequencies(&[1, 2]).is_err());
        assert!(QuantizedCdf::from_probabilities(&[0.7, 0.7]).is_err());
    }

    #[test]
    fn escape_has_minimum_width() {
        let cdf = gaussian_cdf(GaussianKey::snap(0.0, 1.0), &sigma_table()).unwrap();
        assert_eq!(cdf.range_of(ESCAPE).1, 1);
    }

    #[test]
    fn small_roundtrip_with_escapes() {
        let cdf = gaussian_cdf(GaussianKey::snap(0.3, 2.0), &sigma_table()).unwrap();
        let vals = [0, 1, -1, 127, -127, 128, -128, 5000, i32::MIN, i32::MAX, 3];
        let mut enc = RangeEncoder::new();
        for &v in &vals {
            enc.encode_latent(&cdf, v).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &v in &vals {
            assert_eq!(dec.decode_latent(&cdf).unwrap(), v);
        }
    }
}
