//! Chunk-initialization strategies, selected by name.

use crate::error::{Error, Result};
use crate::flow::ActionChunk;
use crate::gpm::{sample_prior_init, EpisodeSession};
use crate::lcm::{inject_bias, LcmState};
use crate::rng::Rng;

use super::rollout::{EpisodeHandle, StepTrace};

/// Where a chunk's ODE starts.
#[derive(Clone, Debug, PartialEq)]
pub enum ChunkInit {
    /// Already in the policy's normalized coordinates.
    Normalized(ActionChunk),
    /// In action units; normalized by the policy before integration.
    Raw(ActionChunk),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan {
    pub init: ChunkInit,
    pub steps: usize,
    pub trace: StepTrace,
}

/// Per-episode mutable state owned by the rollout loop.
#[derive(Default)]
pub struct EpisodeState<'b> {
    pub session: Option<EpisodeSession<'b>>,
    pub lcm: Option<LcmState>,
}

pub trait InitStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_memory(&self) -> bool;

    fn needs_lcm(&self) -> bool;

    /// Called once before the first chunk.
    fn begin<'b>(&self, handle: &mut EpisodeHandle<'b>, start_context: &[f64]) -> Result<EpisodeState<'b>>;

    /// Initialization and step count for the next chunk. `prev` is the last
    /// executed chunk, absent at the start of the episode.
    fn plan(
        &self,
        handle: &mut EpisodeHandle<'_>,
        state: &mut EpisodeState<'_>,
        prev: Option<&ActionChunk>,
        nfe_override: Option<usize>,
        rng: &mut Rng,
    ) -> Result<ChunkPlan>;
}

/// Standard-normal start at `λ = 1`, fixed step count.
pub struct GaussianInit;

/// Retrieved prior sample with the similarity-adaptive schedule.
pub struct PriorInit;

/// Retrieved prior sample plus the learned consistency bias.
pub struct PriorWithConsistency;

impl InitStrategy for GaussianInit {
    fn name(&self) -> &'static str {
        "gaussian-init"
    }
    fn needs_memory(&self) -> bool {
        false
    }
    fn needs_lcm(&self) -> bool {
        false
    }
    fn begin<'b>(&self, _: &mut EpisodeHandle<'b>, _: &[f64]) -> Result<EpisodeState<'b>> {
        Ok(EpisodeState::default())
    }
    fn plan(
        &self,
        handle: &mut EpisodeHandle<'_>,
        _: &mut EpisodeState<'_>,
        _: Option<&ActionChunk>,
        nfe_override: Option<usize>,
        rng: &mut Rng,
    ) -> Result<ChunkPlan> {
        let (h, a) = handle.chunk_shape();
        let steps = nfe_override.unwrap_or(handle.nfe_max());
        Ok(ChunkPlan {
            init: ChunkInit::Normalized(ActionChunk::standard_normal(h, a, rng)),
            steps,
            trace: StepTrace {
                similarity: None,
                noise_scale: 1.0,
                nfe: steps,
                progress: None,
            },
        })
    }
}

fn prior_plan(
    handle: &mut EpisodeHandle<'_>,
    state: &mut EpisodeState<'_>,
    nfe_override: Option<usize>,
    rng: &mut Rng,
) -> Result<(ActionChunk, ChunkPlan)> {
    let h = handle.chunk_shape().0;
    let session = state
        .session
        .as_mut()
        .ok_or_else(|| Error::invalid("prior strategy used without a session"))?;
    let progress = session.progress();
    let similarity = session.similarity();
    let (prior, schedule) = session.step(h)?;
    let sample = sample_prior_init(&prior, &schedule, rng);
    let steps = nfe_override.unwrap_or(schedule.nfe);
    let plan = ChunkPlan {
        init: ChunkInit::Raw(sample.clone()),
        steps,
        trace: StepTrace {
            similarity: Some(similarity),
            noise_scale: schedule.noise_scale,
            nfe: steps,
            progress: Some(progress),
        },
    };
    Ok((sample, plan))
}

impl InitStrategy for PriorInit {
    fn name(&self) -> &'static str {
        "gpm-init"
    }
    fn needs_memory(&self) -> bool {
        true
    }
    fn needs_lcm(&self) -> bool {
        false
    }
    fn begin<'b>(&self, handle: &mut EpisodeHandle<'b>, start_context: &[f64]) -> Result<EpisodeState<'b>> {
        Ok(EpisodeState {
            session: Some(handle.open_session(start_context)?),
            lcm: None,
        })
    }
    fn plan(
        &self,
        handle: &mut EpisodeHandle<'_>,
        state: &mut EpisodeState<'_>,
        _: Option<&ActionChunk>,
        nfe_override: Option<usize>,
        rng: &mut Rng,
    ) -> Result<ChunkPlan> {
        Ok(prior_plan(handle, state, nfe_override, rng)?.1)
    }
}

impl InitStrategy for PriorWithConsistency {
    fn name(&self) -> &'static str {
        "gpm+lcm"
    }
    fn needs_memory(&self) -> bool {
        true
    }
    fn needs_lcm(&self) -> bool {
        true
    }
    fn begin<'b>(&self, handle: &mut EpisodeHandle<'b>, start_context: &[f64]) -> Result<EpisodeState<'b>> {
        Ok(EpisodeState {
            session: Some(handle.open_session(start_context)?),
            lcm: Some(handle.lcm_reset()?),
        })
    }
    fn plan(
        &self,
        handle: &mut EpisodeHandle<'_>,
        state: &mut EpisodeState<'_>,
        prev: Option<&ActionChunk>,
        nfe_override: Option<usize>,
        rng: &mut Rng,
    ) -> Result<ChunkPlan> {
        let (sample, mut plan) = prior_plan(handle, state, nfe_override, rng)?;
        let (h, a) = handle.chunk_shape();
        let zeros = ActionChunk::zeros(h, a);
        let lcm_state = state.lcm.take().ok_or_else(|| Error::invalid("consistency state missing"))?;
        let (next, bias) = handle.lcm_predict(&lcm_state, prev.unwrap_or(&zeros))?;
        state.lcm = Some(next);
        plan.init = ChunkInit::Raw(inject_bias(&sample, &bias)?);
        Ok(plan)
    }
}

/// Strategies addressable by name; registration order is report order.
pub struct StrategyRegistry {
    strategies: Vec<Box<dyn InitStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self {
            strategies: vec![Box::new(GaussianInit), Box::new(PriorInit), Box::new(PriorWithConsistency)],
        }
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, strategy: Box<dyn InitStrategy>) -> Result<()> {
        if self.get(strategy.name()).is_ok() {
            return Err(Error::invalid(format!("strategy {} already registered", strategy.name())));
        }
        self.strategies.push(strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&dyn InitStrategy> {
        self.strategies
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::Unknown {
                kind: "mode",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }
}
