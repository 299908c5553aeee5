//! Three-stage training: flow-matching pretraining, contrastive prior-head
//! training, and consistency-residual regression.

mod config;
mod contrastive;
mod pipeline;
mod stage1;
mod stage3;

pub use config::{PipelineConfig, Stage1Config, Stage2Config, Stage3Config, StageConfig};
pub use contrastive::{
    embedding_margin, episode_contexts, infonce_loss, pooled_context, stage2_train, task_pair_batches, ContrastiveItem, InfoNceLoss, MarginReport, PairItem,
    Stage2Output, TaskPairBatches,
};
pub use pipeline::{stage_seed, train_all, TrainedStack};
pub use stage1::{cfm_batch, stage1_train, Stage1Output};
pub use stage3::{build_memory_bank, demo_rollout, lcm_rollouts, stage3_train, Stage3Output};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, GradientReport, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub smoothed: f64,
    pub wall_ms: u64,
}

/// Per-step losses of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: u8,
    pub seed: u64,
    pub window: usize,
    pub rows: Vec<LogRow>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl TrainLog {
    pub fn new(stage: u8, seed: u64, window: usize) -> Self {
        Self {
            stage,
            seed,
            window: window.max(1),
            rows: Vec::new(),
            started: None,
        }
    }

    pub fn record(&mut self, step: usize, loss: f64) {
        let started = *self.started.get_or_insert_with(Instant::now);
        if let Some(last) = self.rows.last() {
            debug_assert!(step > last.step, "log steps must increase");
        }
        let lo = self.rows.len().saturating_sub(self.window - 1);
        let tail = &self.rows[lo..];
        let smoothed = (tail.iter().map(|r| r.loss).sum::<f64>() + loss) / (tail.len() + 1) as f64;
        self.rows.push(LogRow {
            step,
            loss,
            smoothed,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    /// Mean of the first `window` losses.
    pub fn initial_smoothed(&self) -> Option<f64> {
        let n = self.window.min(self.rows.len());
        (n > 0).then(|| self.rows[..n].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.rows.last().map(|r| r.smoothed)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(["step", "loss", "smoothed", "wall_ms", "seed"]).map_err(csv_error)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.smoothed.to_string(),
                r.wall_ms.to_string(),
                self.seed.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Run `config.steps` AdamW updates. `batch_report` builds the loss and its
/// gradient for a given step.
pub(crate) fn optimize(
    store: &mut ParamStore,
    config: &StageConfig,
    log: &mut TrainLog,
    mut batch_report: impl FnMut(usize, &ParamStore) -> Result<GradientReport>,
) -> Result<()> {
    let opt = AdamW::default();
    for step in 0..config.steps {
        let report = batch_report(step, store).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
            other => other,
        })?;
        if !report.loss.is_finite() || !report.grads.is_finite() {
            return Err(Error::Diverged { step, loss: report.loss });
        }
        log.record(step, report.loss);
        opt.step(store, &report.grads, config.lr_at(step), config.weight_decay)?;
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            log::info!(
                "stage {} step {}/{} loss {:.5} smoothed {:.5}",
                log.stage,
                step + 1,
                config.steps,
                report.loss,
                log.final_smoothed().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
