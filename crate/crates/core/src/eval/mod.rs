//! Episode rollouts, benchmark sweeps and mode ablations.
//!
//! Every mode runs the same episode plan: episode `i` gets the same task and
//! seed whatever the mode, so per-episode differences are paired.

mod rollout;
mod strategy;

pub use rollout::{
    discontinuity_metric, rollout_episode, ChunkGenerator, EpisodeCounters, EpisodeHandle, EpisodeResult, PolicyStack,
    ReplayGenerator, RolloutSettings, StepTrace,
};
pub use strategy::{ChunkInit, ChunkPlan, EpisodeState, GaussianInit, InitStrategy, PriorInit, PriorWithConsistency, StrategyRegistry};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};
use crate::taskgen::{Dataset, FamilyRegistry, Split};
use crate::train::csv_error;

pub const SWEEP_SCHEMA: &str = "sweep-v1";
pub const ABLATION_SCHEMA: &str = "ablation-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Endpoint distance below which an episode counts as a success.
    pub success_threshold: f64,
    /// Fixed step counts swept for every mode.
    pub sweep_nfe: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            success_threshold: 0.05,
            sweep_nfe: vec![1, 2, 4, 10],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, nfe_max: usize) -> Result<()> {
        if !(self.success_threshold > 0.0) {
            return Err(Error::Config("[eval] success_threshold must be positive".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("[eval] episodes must be positive".into()));
        }
        if let Some(&n) = self.sweep_nfe.iter().find(|&&n| n < 1 || n > nfe_max) {
            return Err(Error::Config(format!("[eval] sweep NFE {n} outside [1, {nfe_max}]")));
        }
        Ok(())
    }
}

/// Which split, mode and step override an evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: String,
    pub nfe: Option<usize>,
    pub episodes: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub task: usize,
    pub seed: u64,
}

/// Episode `i` runs task `i mod n` of the split with a seed derived from `i`.
pub fn episode_plan(dataset: &Dataset, split: Split, episodes: usize, seed: u64) -> Result<Vec<EpisodeSpec>> {
    let tasks: Vec<usize> = (0..dataset.tasks.len()).filter(|&t| dataset.tasks[t].split == split).collect();
    if tasks.is_empty() {
        return Err(Error::invalid(format!("split {split:?} has no tasks")));
    }
    Ok((0..episodes)
        .map(|i| EpisodeSpec {
            task: tasks[i % tasks.len()],
            seed: derive_seed(seed, &format!("episode/{i}")),
        })
        .collect())
}

/// Run a plan in parallel; results keep plan order.
pub fn run_episodes(
    registry: &FamilyRegistry,
    dataset: &Dataset,
    stack: PolicyStack<'_>,
    strategy: &dyn InitStrategy,
    settings: RolloutSettings,
    plan: &[EpisodeSpec],
) -> Result<Vec<EpisodeResult>> {
    stack.check(strategy)?;
    plan.par_iter()
        .map(|ep| {
            let task = &dataset.tasks[ep.task];
            let mut rng = substream(ep.seed, "rollout");
            rollout_episode(registry, &task.id, &task.descriptor, stack, strategy, settings, ep.seed, &mut rng)
        })
        .collect()
}

pub fn evaluate(
    registry: &FamilyRegistry,
    dataset: &Dataset,
    stack: PolicyStack<'_>,
    strategies: &StrategyRegistry,
    config: &RolloutConfig,
    success_threshold: f64,
) -> Result<Vec<EpisodeResult>> {
    let strategy = strategies.get(&config.mode)?;
    let plan = episode_plan(dataset, config.split, config.episodes, config.seed)?;
    let settings = RolloutSettings {
        nfe_override: config.nfe,
        success_threshold,
    };
    run_episodes(registry, dataset, stack, strategy, settings, &plan)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Aggregate metrics of one set of episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub mean_error: f64,
    pub median_error: f64,
    pub success_rate: f64,
    pub mean_nfe: f64,
    pub median_discontinuity: Option<f64>,
}

impl Summary {
    pub fn of(results: &[EpisodeResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid("no episodes to summarize"));
        }
        let n = results.len() as f64;
        let mut errors: Vec<f64> = results.iter().map(|r| r.endpoint_error).collect();
        let mut disc: Vec<f64> = results.iter().filter_map(|r| r.discontinuity).collect();
        Ok(Self {
            episodes: results.len(),
            mean_error: errors.iter().sum::<f64>() / n,
            median_error: median(&mut errors).expect("non-empty"),
            success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
            mean_nfe: results.iter().map(|r| r.nfe as f64).sum::<f64>() / n,
            median_discontinuity: median(&mut disc),
        })
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn nfe_label(nfe: Option<usize>) -> String {
    nfe.map(|n| n.to_string()).unwrap_or_else(|| "adaptive".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: String,
    /// `None` means the mode's own step rule.
    pub nfe: Option<usize>,
}

/// Default grid: every mode at each fixed step count, and the memory modes
/// also at their adaptive schedule.
pub fn default_grid(strategies: &StrategyRegistry, sweep_nfe: &[usize]) -> Vec<SweepCell> {
    let mut grid = Vec::new();
    for name in strategies.names() {
        let s = strategies.get(name).expect("registered");
        if s.needs_memory() {
            grid.push(SweepCell { mode: name.into(), nfe: None });
        }
        for &n in sweep_nfe {
            grid.push(SweepCell { mode: name.into(), nfe: Some(n) });
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub summary: Summary,
    /// Wall-clock per executed chunk; kept out of the CSV.
    pub wall_ms_per_chunk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub split: Split,
    pub success_threshold: f64,
    pub nfe_max: usize,
    pub rows: Vec<SweepRow>,
}

/// Run every grid cell on one shared episode plan.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    registry: &FamilyRegistry,
    dataset: &Dataset,
    stack: PolicyStack<'_>,
    strategies: &StrategyRegistry,
    grid: &[SweepCell],
    split: Split,
    episodes: usize,
    seed: u64,
    success_threshold: f64,
) -> Result<SweepReport> {
    let plan = episode_plan(dataset, split, episodes, seed)?;
    let mut rows = Vec::with_capacity(grid.len());
    for cell in grid {
        let strategy = strategies.get(&cell.mode)?;
        let settings = RolloutSettings {
            nfe_override: cell.nfe,
            success_threshold,
        };
        let started = Instant::now();
        let results = run_episodes(registry, dataset, stack, strategy, settings, &plan)?;
        let chunks: usize = results.iter().map(|r| r.trace.len()).sum();
        let wall = started.elapsed().as_secs_f64() * 1e3;
        let summary = Summary::of(&results)?;
        log::info!(
            "{} @ {}: median error {:.4}, success {:.3}, mean NFE {:.2}",
            cell.mode,
            nfe_label(cell.nfe),
            summary.median_error,
            summary.success_rate,
            summary.mean_nfe
        );
        rows.push(SweepRow {
            cell: cell.clone(),
            summary,
            wall_ms_per_chunk: wall / chunks.max(1) as f64,
        });
    }
    Ok(SweepReport {
        split,
        success_threshold,
        nfe_max: stack.gpm.bounds.nfe_max,
        rows,
    })
}

impl SweepReport {
    pub fn row(&self, mode: &str, nfe: Option<usize>) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.cell.mode == mode && r.cell.nfe == nfe)
    }

    /// Adaptive prior initialization against the Gaussian start at `N_max`.
    pub fn headline(&self) -> Option<(&SweepRow, &SweepRow)> {
        Some((self.row("gpm-init", None)?, self.row("gaussian-init", Some(self.nfe_max))?))
    }

    /// Metrics per cell. Contains no timing, so identical inputs give
    /// identical bytes.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "schema",
            "split",
            "mode",
            "nfe",
            "episodes",
            "mean_error",
            "median_error",
            "success_rate",
            "mean_nfe",
            "median_discontinuity",
            "success_threshold",
        ])
        .map_err(csv_error)?;
        for r in &self.rows {
            let s = &r.summary;
            w.write_record([
                SWEEP_SCHEMA.to_string(),
                split_name(self.split).into(),
                r.cell.mode.clone(),
                nfe_label(r.cell.nfe),
                s.episodes.to_string(),
                s.mean_error.to_string(),
                s.median_error.to_string(),
                s.success_rate.to_string(),
                s.mean_nfe.to_string(),
                opt_field(s.median_discontinuity),
                self.success_threshold.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn timing_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "nfe", "episodes", "wall_ms_per_chunk"]).map_err(csv_error)?;
        for r in &self.rows {
            w.write_record([
                r.cell.mode.clone(),
                nfe_label(r.cell.nfe),
                r.summary.episodes.to_string(),
                format!("{:.4}", r.wall_ms_per_chunk),
            ])
            .map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Seen => "seen",
        Split::Unseen => "unseen",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub split: Split,
    pub mode: String,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub success_threshold: f64,
    pub rows: Vec<AblationRow>,
}

/// Every registered mode at its own step rule on each split, rows ordered by
/// split then registration order.
pub fn ablation_report(
    registry: &FamilyRegistry,
    dataset: &Dataset,
    stack: PolicyStack<'_>,
    strategies: &StrategyRegistry,
    splits: &[Split],
    episodes: usize,
    seed: u64,
    success_threshold: f64,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &split in splits {
        let plan = episode_plan(dataset, split, episodes, seed)?;
        for name in strategies.names() {
            let settings = RolloutSettings {
                nfe_override: None,
                success_threshold,
            };
            let results = run_episodes(registry, dataset, stack, strategies.get(name)?, settings, &plan)?;
            rows.push(AblationRow {
                split,
                mode: name.to_string(),
                summary: Summary::of(&results)?,
            });
        }
    }
    Ok(AblationReport { success_threshold, rows })
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "schema",
            "split",
            "mode",
            "episodes",
            "success_rate",
            "median_error",
            "mean_nfe",
            "median_discontinuity",
            "success_threshold",
        ])
        .map_err(csv_error)?;
        for r in &self.rows {
            let s = &r.summary;
            w.write_record([
                ABLATION_SCHEMA.to_string(),
                split_name(r.split).into(),
                r.mode.clone(),
                s.episodes.to_string(),
                s.success_rate.to_string(),
                s.median_error.to_string(),
                s.mean_nfe.to_string(),
                opt_field(s.median_discontinuity),
                self.success_threshold.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// One JSON object per episode with its per-chunk schedule trace.
pub fn write_trace(path: &Path, results: &[EpisodeResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
