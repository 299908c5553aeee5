//! Per-episode retrieval cache.
//!
//! Retrieval happens once, at [`EpisodeSession::begin`]. Each later step only
//! re-slices the cached neighbors at the current progress and recomposes the
//! prior.

use serde::{Deserialize, Serialize};

use super::bank::MemoryBank;
use super::embed::{embed_context, PriorHead, TaskEmbedding};
use super::prior::{compose_prior, extract_aligned_chunk, resample_chunk, RetrievalResult, TaskPrior};
use super::schedule::{SamplerSchedule, ScheduleBounds};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpmConfig {
    /// Neighbors retrieved per episode.
    pub k: usize,
    /// Softmax temperature on retrieval scores.
    pub temperature: f64,
    pub var_floor: f64,
    #[serde(flatten)]
    pub bounds: ScheduleBounds,
}

impl Default for GpmConfig {
    fn default() -> Self {
        Self {
            k: 8,
            temperature: 0.1,
            var_floor: 1e-4,
            bounds: ScheduleBounds::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeSession<'b> {
    bank: &'b MemoryBank,
    config: GpmConfig,
    query: TaskEmbedding,
    retrieval: RetrievalResult,
    schedule: SamplerSchedule,
    progress: f64,
    steps: usize,
    reference_len: f64,
}

impl<'b> EpisodeSession<'b> {
    /// Embed `context`, retrieve and cache the top-k neighbors.
    pub fn begin(bank: &'b MemoryBank, head: &PriorHead, context: &[f64], config: GpmConfig, reference_len: f64) -> Result<Self> {
        let query = embed_context(head, context)?;
        Self::from_query(bank, query, config, reference_len, |_| true)
    }

    /// Start from an existing query, retrieving only among entries accepted by `keep`.
    pub fn from_query(
        bank: &'b MemoryBank,
        query: TaskEmbedding,
        config: GpmConfig,
        reference_len: f64,
        keep: impl Fn(usize) -> bool,
    ) -> Result<Self> {
        if !(reference_len > 0.0) {
            return Err(Error::invalid("reference episode length must be positive"));
        }
        let neighbors = bank.retrieve_filtered(&query, config.k, keep)?;
        let retrieval = RetrievalResult::from_neighbors(neighbors, config.temperature)?;
        let schedule = config.bounds.schedule(retrieval.similarity)?;
        Ok(Self {
            bank,
            config,
            query,
            retrieval,
            schedule,
            progress: 0.0,
            steps: 0,
            reference_len,
        })
    }

    pub fn query(&self) -> &TaskEmbedding {
        &self.query
    }

    pub fn retrieval(&self) -> &RetrievalResult {
        &self.retrieval
    }

    pub fn similarity(&self) -> f64 {
        self.retrieval.similarity
    }

    pub fn schedule(&self) -> SamplerSchedule {
        self.schedule
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Prior at the current progress, without advancing.
    pub fn prior_at_progress(&self, horizon: usize) -> Result<TaskPrior> {
        let chunks = self
            .retrieval
            .neighbors
            .iter()
            .map(|n| resample_chunk(&extract_aligned_chunk(self.bank.entry(n.index), self.progress)?, horizon))
            .collect::<Result<Vec<_>>>()?;
        compose_prior(&chunks, &self.retrieval.weights, self.retrieval.similarity, self.config.var_floor)
    }

    /// Prior and schedule for the next chunk, then advance progress by one
    /// executed chunk: `ρ ← min(1, ρ + H / T_ref)`.
    pub fn step(&mut self, horizon: usize) -> Result<(TaskPrior, SamplerSchedule)> {
        let prior = self.prior_at_progress(horizon)?;
        self.progress = (self.progress + horizon as f64 / self.reference_len).min(1.0);
        self.steps += 1;
        Ok((prior, self.schedule))
    }
}
