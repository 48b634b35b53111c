//! Pieces shared by the training loops: epoch ordering, batch preparation
//! and loss bookkeeping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthmap::augment::{augment, AugmentConfig};
use crate::depthmap::Sample;
use crate::error::{Error, Result};
use crate::nn::LrSchedule;
use crate::synth::derive_seed;

/// Epoch count and learning-rate schedule for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
}

impl PhaseConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        let lrs = std::iter::once(self.lr.base).chain(self.lr.milestones.iter().map(|m| m.1));
        for lr in lrs {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!(
                    "{name}: learning rate {lr} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// One optimizer step's loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Writes a loss history as CSV with a header row. A `config_digest`
/// column repeating `digest` is appended when one is given.
pub fn write_loss_csv(
    records: &[LossRecord],
    digest: Option<&str>,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["phase", "epoch", "step", "lr", "loss"];
    header.extend(digest.map(|_| "config_digest"));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut row = vec![
            r.phase.clone(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
        ];
        row.extend(digest.map(str::to_string));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &std::path::Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Sample indices for one epoch, shuffled by `(seed, epoch)` and chunked
/// into batches. The last batch may be smaller.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Augments the selected samples. Every sample gets its own seed derived
/// from the step, so runs are reproducible and batches are independent.
pub fn prepare_batch(
    samples: &[Sample],
    indices: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<Sample>> {
    let first = samples
        .get(
            *indices
                .first()
                .ok_or_else(|| Error::Input("empty batch".into()))?,
        )
        .ok_or_else(|| Error::Input("batch index out of range".into()))?;
    let (h, w) = first.dims();
    let cfg = cfg.fitted_to(h, w);
    indices
        .iter()
        .map(|&i| {
            let s = &samples[i];
            if s.dims() != (h, w) {
                return Err(Error::Dimension(format!(
                    "training samples must share dimensions: {:?} vs {:?}",
                    s.dims(),
                    (h, w)
                )));
            }
            augment(
                s,
                &cfg,
                derive_seed(derive_seed(seed, step as u64), i as u64),
            )
        })
        .collect()
}

/// Aborts training on a non-finite loss.
pub fn check_loss(phase: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            phase: phase.to_string(),
            step,
            loss,
        })
    }
}
