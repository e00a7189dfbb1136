use rayon::prelude::*;

use super::TrainingConfig;
use crate::error::{Error, Result};
use crate::nn::{adam_step, cosine_lr, AdamConfig, Gradients, ModelParams};
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    /// Mean of the first and last `window` losses.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |r: &[LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        Some((mean(&self.records[..w]), mean(&self.records[n - w..])))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.9e}\n", r.step, r.loss));
        }
        out
    }
}

/// Where a training call starts and stops. `resume` continues from stored
/// parameters (step counter and optimiser moments included); `stop_at`
/// ends early without changing the learning-rate schedule.
#[derive(Clone, Debug, Default)]
pub struct TrainControl {
    pub resume: Option<ModelParams>,
    pub stop_at: Option<u64>,
}

/// Parameters after training plus the per-step batch losses.
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams,
    pub log: LossLog,
}

/// Run Adam with cosine annealing until `params.step_count` reaches
/// `cfg.iterations` (or `stop_at`). Step `k` draws its batch from stream `k` of a
/// stage-specific seed, so stopping and resuming from a checkpoint
/// replays the same trajectory. `sample_loss` returns one sample's loss
/// and gradient; the batch is their mean.
pub(crate) fn run<F>(
    fresh: ModelParams,
    ctl: TrainControl,
    cfg: &TrainingConfig,
    stage_tag: u64,
    sample_loss: F,
) -> Result<Trained>
where
    F: Fn(&ModelParams, &mut StreamRng) -> Result<(f64, Gradients)> + Sync,
{
    cfg.validate()?;
    let mut params = match ctl.resume {
        Some(p) => {
            if p.entries.len() != fresh.entries.len()
                || p.entries.iter().zip(&fresh.entries).any(|((a, pa), (b, pb))| a != b || pa.shape != pb.shape)
            {
                return Err(Error::invalid("resume parameters do not match the network layout"));
            }
            p
        }
        None => fresh,
    };
    let end = ctl.stop_at.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    let adam = AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let base = rng::derive_seed(cfg.seed, stage_tag);
    let mut log = LossLog::default();
    while params.step_count < end {
        let step = params.step_count;
        let seeds: Vec<u64> = (0..cfg.batch_size as u64).map(|b| rng::derive_seed(base ^ step, b)).collect();
        let results: Vec<Result<(f64, Gradients)>> = seeds
            .par_iter()
            .map(|&s| sample_loss(&params, &mut rng::stream(s, step)))
            .collect();
        let mut loss = 0.0;
        let mut grads = params.zero_gradients();
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_assign(&g);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        grads.scale(inv);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence {
                step: step as usize,
                detail: format!("{} loss is {loss}; gradients finite: {}", cfg.stage.name(), grads.all_finite()),
            });
        }
        let lr = cosine_lr(cfg.lr_max, cfg.lr_min, step, cfg.iterations);
        adam_step(&mut params, &grads, lr, &adam)?;
        log.records.push(LossRecord { step, loss });
        if (step + 1) % 500 == 0 {
            log::info!("{} step {} loss {loss:.5}", cfg.stage.name(), step + 1);
        }
    }
    Ok(Trained { params, log })
}
