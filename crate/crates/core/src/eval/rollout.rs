//! Closed-loop episode execution.

use serde::{Deserialize, Serialize};

use super::strategy::{ChunkInit, InitStrategy};
use crate::error::{Error, Result};
use crate::flow::{ActionChunk, FlowPolicy, NfeMeter};
use crate::gpm::{EpisodeSession, GpmConfig, MemoryBank, PriorHead};
use crate::lcm::{ConsistencyBias, LcmState, LocalConsistency};
use crate::nn::linalg::norm;
use crate::rng::Rng;
use crate::taskgen::{featurize, observe, progress_reference, FamilyRegistry, TaskDescriptor};

/// Produces an executed chunk from an initialization.
pub trait ChunkGenerator: Sync {
    fn chunk_shape(&self) -> (usize, usize);

    fn generate(&self, chunk: usize, context: &[f64], init: &ChunkInit, steps: usize, meter: &mut NfeMeter) -> Result<ActionChunk>;
}

impl ChunkGenerator for FlowPolicy {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.horizon(), self.action_dim())
    }

    fn generate(&self, _: usize, context: &[f64], init: &ChunkInit, steps: usize, meter: &mut NfeMeter) -> Result<ActionChunk> {
        match init {
            ChunkInit::Normalized(x) => self.sample_normalized(context, x, steps, meter),
            ChunkInit::Raw(x) => self.sample(context, x, steps, meter),
        }
    }
}

/// Replays fixed chunks regardless of input, charging the requested steps.
pub struct ReplayGenerator {
    pub chunks: Vec<ActionChunk>,
}

impl ChunkGenerator for ReplayGenerator {
    fn chunk_shape(&self) -> (usize, usize) {
        self.chunks[0].shape()
    }

    fn generate(&self, chunk: usize, _: &[f64], _: &ChunkInit, steps: usize, meter: &mut NfeMeter) -> Result<ActionChunk> {
        for _ in 0..steps {
            meter.record();
        }
        self.chunks
            .get(chunk)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no replay chunk {chunk}")))
    }
}

/// Everything an episode may consult. Optional parts are required only by
/// the strategies that use them.
#[derive(Clone, Copy)]
pub struct PolicyStack<'a> {
    pub generator: &'a dyn ChunkGenerator,
    pub memory: Option<(&'a PriorHead, &'a MemoryBank)>,
    pub lcm: Option<&'a LocalConsistency>,
    pub gpm: GpmConfig,
}

impl PolicyStack<'_> {
    pub fn check(&self, strategy: &dyn InitStrategy) -> Result<()> {
        if strategy.needs_memory() && self.memory.is_none() {
            return Err(Error::invalid(format!("mode {} needs a prior head and a memory bank", strategy.name())));
        }
        if strategy.needs_lcm() && self.lcm.is_none() {
            return Err(Error::invalid(format!("mode {} needs a consistency model", strategy.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCounters {
    pub retrievals: u64,
    pub lcm_calls: u64,
}

/// The strategies' only access to memory and consistency modules; counts
/// every call.
pub struct EpisodeHandle<'b> {
    stack: PolicyStack<'b>,
    reference_len: f64,
    counters: EpisodeCounters,
}

impl<'b> EpisodeHandle<'b> {
    pub fn chunk_shape(&self) -> (usize, usize) {
        self.stack.generator.chunk_shape()
    }

    pub fn nfe_max(&self) -> usize {
        self.stack.gpm.bounds.nfe_max
    }

    pub fn open_session(&mut self, context: &[f64]) -> Result<EpisodeSession<'b>> {
        let (head, bank) = self.stack.memory.ok_or_else(|| Error::invalid("no memory bank loaded"))?;
        self.counters.retrievals += 1;
        EpisodeSession::begin(bank, head, context, self.stack.gpm, self.reference_len)
    }

    pub fn lcm_reset(&self) -> Result<LcmState> {
        Ok(self.stack.lcm.ok_or_else(|| Error::invalid("no consistency model loaded"))?.reset_state())
    }

    pub fn lcm_predict(&mut self, state: &LcmState, prev: &ActionChunk) -> Result<(LcmState, ConsistencyBias)> {
        let lcm = self.stack.lcm.ok_or_else(|| Error::invalid("no consistency model loaded"))?;
        self.counters.lcm_calls += 1;
        lcm.predict(state, prev)
    }
}

/// Schedule values used for one chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub similarity: Option<f64>,
    pub noise_scale: f64,
    pub nfe: usize,
    pub progress: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub mode: String,
    pub task_id: String,
    pub seed: u64,
    pub endpoint_error: f64,
    pub success: bool,
    pub nfe: u64,
    pub discontinuity: Option<f64>,
    pub counters: EpisodeCounters,
    pub trace: Vec<StepTrace>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutSettings {
    pub nfe_override: Option<usize>,
    pub success_threshold: f64,
}

/// Mean `‖last row of chunk i − first row of chunk i+1‖₂`; absent for fewer
/// than two chunks.
pub fn discontinuity_metric(chunks: &[ActionChunk]) -> Option<f64> {
    if chunks.len() < 2 {
        return None;
    }
    let total: f64 = chunks
        .windows(2)
        .map(|w| {
            let last = w[0].row(w[0].rows() - 1);
            let diff: Vec<f64> = last.iter().zip(w[1].row(0)).map(|(a, b)| b - a).collect();
            norm(&diff)
        })
        .sum();
    Some(total / (chunks.len() - 1) as f64)
}

/// Run one episode of `task` from its start position until the family's
/// reference length has been executed.
#[allow(clippy::too_many_arguments)]
pub fn rollout_episode(
    registry: &FamilyRegistry,
    task_id: &str,
    task: &TaskDescriptor,
    stack: PolicyStack<'_>,
    strategy: &dyn InitStrategy,
    settings: RolloutSettings,
    seed: u64,
    rng: &mut Rng,
) -> Result<EpisodeResult> {
    stack.check(strategy)?;
    if let Some(n) = settings.nfe_override {
        if n < 1 || n > stack.gpm.bounds.nfe_max {
            return Err(Error::invalid(format!("NFE override {n} outside [1, {}]", stack.gpm.bounds.nfe_max)));
        }
    }
    let t_ref = registry.get(&task.family)?.episode_len();
    let (h, _) = stack.generator.chunk_shape();
    let n_chunks = t_ref.div_ceil(h);
    let mut handle = EpisodeHandle {
        stack,
        reference_len: progress_reference(registry, &task.family, h)?,
        counters: EpisodeCounters::default(),
    };
    let mut meter = NfeMeter::new();
    let mut position = task.params.start.to_vec();
    let start_context = featurize(registry, task, &observe(task, &position)?)?;
    let mut state = strategy.begin(&mut handle, &start_context)?;
    let mut executed: Vec<ActionChunk> = Vec::with_capacity(n_chunks);
    let mut trace = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let context = featurize(registry, task, &observe(task, &position)?)?;
        let plan = strategy.plan(&mut handle, &mut state, executed.last(), settings.nfe_override, rng)?;
        let chunk = stack.generator.generate(c, &context, &plan.init, plan.steps, &mut meter)?;
        position = chunk.row(chunk.rows() - 1).to_vec();
        executed.push(chunk);
        trace.push(plan.trace);
    }
    let goal = task.params.goal;
    let endpoint_error = norm(&[position[0] - goal[0], position[1] - goal[1]]);
    Ok(EpisodeResult {
        mode: strategy.name().to_string(),
        task_id: task_id.to_string(),
        seed,
        endpoint_error,
        success: endpoint_error < settings.success_threshold,
        nfe: meter.count(),
        discontinuity: discontinuity_metric(&executed),
        counters: handle.counters,
        trace,
    })
}
