//! Minibatch training with a thread-count independent result.

use std::path::Path;

use gcmc_core::train::{average_gradients, example_gradients, noise_rng, Adam, LossTerms, TrainConfig};
use gcmc_core::Tensor;
use log::{debug, info};
use rayon::prelude::*;

use crate::atomic;
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub rate_bpp: f64,
    /// MS-SSIM of the batch (or `1 − mse` for the MSE objective).
    pub distortion_d: f64,
}

/// Optimizer steps per pass over the dataset.
pub fn steps_per_epoch(images: usize, batch: usize) -> u64 {
    images.div_ceil(batch.max(1)).max(1) as u64
}

/// Total steps implied by the epoch count and the optional step cap.
pub fn total_steps(config: &TrainConfig, images: usize) -> u64 {
    let by_epochs = config.epochs as u64 * steps_per_epoch(images, config.batch_size);
    if config.max_steps > 0 {
        by_epochs.min(config.max_steps as u64)
    } else {
        by_epochs
    }
}

/// Loss terms and averaged gradients of one batch. Per-image work runs in
/// parallel; the reduction always follows batch order.
pub fn batch_gradients(ck: &Checkpoint, batch: &[Tensor], step: u64) -> Result<(LossTerms, Vec<Tensor>)> {
    let cfg = &ck.train;
    let results: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = noise_rng(cfg.seed, step, i as u64);
            example_gradients(&ck.model, x, cfg.lambda, cfg.distortion, &mut rng)
        })
        .collect();
    let mut terms = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for r in results {
        let (t, g) = r?;
        terms.push(t);
        grads.push(g);
    }
    let avg = average_gradients(&ck.model.store, &grads)?;
    if avg.iter().any(|g| !g.all_finite()) {
        return Err(gcmc_core::Error::NonFinite("gradient".into()).into());
    }
    Ok((LossTerms::mean(&terms), avg))
}

/// Trains `ck` up to `until` total steps, calling `observe` after each.
///
/// A non-finite loss or gradient stops training with [`Error::Diverged`];
/// `ck` then still holds the last good state.
pub fn train(ck: &mut Checkpoint, data: &Dataset, until: u64, mut observe: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
    ck.train.validate()?;
    if data.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    let per_epoch = steps_per_epoch(data.len(), ck.train.batch_size);
    let mut adam = ck.optimizer.take().unwrap_or_else(|| Adam::new(&ck.model.store));
    let mut history = Vec::new();
    let outcome = (|| {
        while ck.step < until {
            let step = ck.step;
            let batch = data.batch(ck.train.seed, step, ck.train.batch_size, ck.train.crop)?;
            let (terms, grads) = batch_gradients(ck, &batch, step).map_err(|e| match e {
                Error::Core(gcmc_core::Error::NonFinite(msg)) => Error::Diverged { step: step as usize, msg },
                other => other,
            })?;
            let epoch = (step / per_epoch) as usize;
            let cfg = ck.train.clone();
            adam.step(&mut ck.model.store, &grads, |g| cfg.lr(g, epoch))?;
            ck.step += 1;
            let rec = StepRecord {
                step,
                loss: terms.loss,
                rate_bpp: terms.rate_bpp,
                distortion_d: terms.quality,
            };
            debug!("step {step}: loss {:.5} rate {:.4} bpp d {:.5}", rec.loss, rec.rate_bpp, rec.distortion_d);
            if step % 50 == 0 {
                info!("step {step}/{until}: loss {:.5}", rec.loss);
            }
            observe(&rec);
            history.push(rec);
        }
        Ok(())
    })();
    ck.optimizer = Some(adam);
    outcome.map(|()| history)
}

pub fn write_loss_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    atomic::write_file(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::format(path, e.to_string());
        csv.write_record(["step", "loss", "rate_bpp", "distortion_d"]).map_err(err)?;
        for r in history {
            csv.write_record([r.step.to_string(), r.loss.to_string(), r.rate_bpp.to_string(), r.distortion_d.to_string()]).map_err(err)?;
        }
        csv.flush().map_err(|e| Error::io(path, e))
    })
}
