//! Rate-distortion evaluation with actual coded sizes.

use std::path::Path;

use gcmc_core::codec::{lambda_index, CodecModel};
use gcmc_core::metrics::{ms_ssim, msssim_db, psnr};
use rayon::prelude::*;

use crate::atomic;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imageio::quantize8;

#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub image: String,
    pub lambda: f64,
    /// Stream bytes · 8 / pixels, header included.
    pub bpp: f64,
    pub msssim: f64,
    pub msssim_db: f64,
    pub psnr: f64,
}

/// Compresses and decodes every image with every `(λ, model)` pair.
/// Images are processed in parallel; the output is in input order.
pub fn rd_sweep(data: &Dataset, models: &[(f64, &CodecModel)]) -> Result<Vec<RdPoint>> {
    if data.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    let rows: Vec<Result<Vec<RdPoint>>> = data
        .images
        .par_iter()
        .map(|(name, x)| {
            models
                .iter()
                .map(|&(lambda, model)| {
                    let c = model.compress(x, lambda_index(lambda))?;
                    let d = model.decompress(&c.bytes)?;
                    let xh = quantize8(&d.image);
                    let msssim = ms_ssim(x, &xh)?;
                    Ok(RdPoint {
                        image: name.clone(),
                        lambda,
                        bpp: c.bytes.len() as f64 * 8.0 / (x.dim(1) * x.dim(2)) as f64,
                        msssim,
                        msssim_db: msssim_db(msssim),
                        psnr: psnr(x, &xh)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Per-λ means, in first-appearance order of λ, labelled `mean`. The dB
/// value is taken from the mean MS-SSIM.
pub fn means(points: &[RdPoint]) -> Vec<RdPoint> {
    let mut lambdas: Vec<f64> = Vec::new();
    for p in points {
        if !lambdas.contains(&p.lambda) {
            lambdas.push(p.lambda);
        }
    }
    lambdas
        .into_iter()
        .map(|lambda| {
            let sel: Vec<&RdPoint> = points.iter().filter(|p| p.lambda == lambda).collect();
            let n = sel.len() as f64;
            let msssim = sel.iter().map(|p| p.msssim).sum::<f64>() / n;
            RdPoint {
                image: "mean".into(),
                lambda,
                bpp: sel.iter().map(|p| p.bpp).sum::<f64>() / n,
                msssim,
                msssim_db: msssim_db(msssim),
                psnr: sel.iter().map(|p| p.psnr).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn write_rd_csv(path: &Path, points: &[RdPoint]) -> Result<()> {
    atomic::write_file(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::format(path, e.to_string());
        csv.write_record(["image", "lambda", "bpp", "msssim", "msssim_db", "psnr"]).map_err(err)?;
        for p in points {
            csv.write_record([p.image.clone(), p.lambda.to_string(), p.bpp.to_string(), p.msssim.to_string(), p.msssim_db.to_string(), p.psnr.to_string()])
                .map_err(err)?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}
