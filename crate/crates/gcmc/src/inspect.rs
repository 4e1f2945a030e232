//! Stream header dumps and the causal-coverage report of a context model.

use std::fmt::Write as _;
use std::path::Path;

use gcmc_core::bitstream::{self, HEADER_LEN};
use gcmc_core::codec::LAMBDA_PRESETS;
use gcmc_core::context::{precedes, sensitivity, structural_coverage, ContextModel};
use gcmc_core::params::ParamStore;
use gcmc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atomic;
use crate::error::{Error, Result};

pub fn header_report(bytes: &[u8]) -> Result<String> {
    let s = bitstream::parse(bytes)?;
    let h = s.header;
    let lambda = LAMBDA_PRESETS.get(h.lambda_index as usize).map_or("?".to_string(), |l| l.to_string());
    let mut out = String::new();
    let _ = writeln!(out, "version       {}", h.version);
    let _ = writeln!(out, "config_hash   {:016x}", h.config_hash);
    let _ = writeln!(out, "width         {}", h.width);
    let _ = writeln!(out, "height        {}", h.height);
    let _ = writeln!(out, "lambda_index  {} (lambda {lambda})", h.lambda_index);
    let _ = writeln!(out, "header_bytes  {HEADER_LEN}");
    let _ = writeln!(out, "z_bytes       {}", s.z_segment.len());
    let _ = writeln!(out, "y_bytes       {}", s.y_segment.len());
    let _ = writeln!(out, "total_bytes   {}", bytes.len());
    let _ = writeln!(out, "bpp           {:.6}", bytes.len() as f64 * 8.0 / (h.width as f64 * h.height as f64));
    Ok(out)
}

/// Dependence of one latent position on a neighbour at offset
/// `(dc, dh, dw)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageRow {
    pub dc: isize,
    pub dh: isize,
    pub dw: isize,
    /// The neighbour is decoded before the centre.
    pub is_causal: bool,
    /// The neighbour lies in the structural receptive field.
    pub structural: bool,
    /// `|Δμ| + |Δσ|` at the centre after a unit change of the neighbour.
    pub sensitivity: f64,
}

/// Coverage of every offset within the receptive reach around the centre of
/// a cube latent, measured on random integer latents.
pub fn coverage(model: &ContextModel, store: &ParamStore, seed: u64) -> Result<Vec<CoverageRow>> {
    let config = model.config;
    let reach = config.reach();
    let side = 2 * reach + 1;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let y = Tensor::from_fn(&[side, side, side], |_| r.gen_range(-3i32..=3) as f64);
    let zp = Tensor::from_fn(&[config.hyper_features * side, side, side], |_| r.gen_range(-1.0..1.0));
    let engine = model.engine(store)?;
    let s = sensitivity(&engine, &y, &zp, 1.0)?;
    let cover = structural_coverage(&config, (side, side, side))?;
    let centre = (reach, reach, reach);
    let p = (reach * side + reach) * side + reach;
    let mut rows = Vec::with_capacity(side * side * side);
    for q in 0..side * side * side {
        let qc = (q / (side * side), (q / side) % side, q % side);
        rows.push(CoverageRow {
            dc: qc.0 as isize - reach as isize,
            dh: qc.1 as isize - reach as isize,
            dw: qc.2 as isize - reach as isize,
            is_causal: precedes(qc, centre),
            structural: cover[p].contains(q),
            sensitivity: s[p][q],
        });
    }
    Ok(rows)
}

pub fn write_coverage_csv(path: &Path, rows: &[CoverageRow]) -> Result<()> {
    atomic::write_file(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::format(path, e.to_string());
        csv.write_record(["dc", "dh", "dw", "is_causal", "structural", "sensitivity"]).map_err(err)?;
        for r in rows {
            csv.write_record([
                r.dc.to_string(),
                r.dh.to_string(),
                r.dw.to_string(),
                (r.is_causal as u8).to_string(),
                (r.structural as u8).to_string(),
                r.sensitivity.to_string(),
            ])
            .map_err(err)?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gcmc_core::context::ContextConfig;

    #[test]
    fn shipped_context_covers_its_causal_window() {
        let mut store = ParamStore::new();
        let model = ContextModel::new(&mut store, "ctx", ContextConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let rows = coverage(&model, &store, 1).unwrap();
        assert_eq!(rows.len(), 343);
        assert_eq!(rows.iter().filter(|r| r.is_causal).count(), 171);
        for r in &rows {
            if r.is_causal {
                assert!(r.structural && r.sensitivity > 0.0, "{r:?}");
            } else {
                assert_eq!(r.sensitivity, 0.0, "{r:?}");
            }
        }
    }

    #[test]
    fn header_report_lists_fields() {
        let h = bitstream::Header {
            version: bitstream::VERSION,
            config_hash: 0xabc,
            width: 64,
            height: 32,
            lambda_index: 2,
            z_len: 2,
        };
        let bytes = bitstream::write(&h, &[1, 2], &[3, 4, 5]).unwrap();
        let rep = header_report(&bytes).unwrap();
        assert!(rep.contains("width         64"));
        assert!(rep.contains("lambda 32"));
        assert!(rep.contains("y_bytes       3"));
        assert!(header_report(&bytes[..10]).is_err());
    }
}
