//! Memory-bank construction and Stage 3: consistency-residual regression
//! with the policy and the retrieval stack frozen.

use rand::Rng as _;

use super::{optimize, pooled_context, Stage3Config, TrainLog};
use crate::error::{Error, Result};
use crate::flow::ActionChunk;
use crate::gpm::{EpisodeSession, GpmConfig, MemoryBank, MemoryEntry, PriorHead};
use crate::nn::backward;
use crate::lcm::{residual_target, sample_cold_masks, LcmConfig, LcmLoss, LcmRollout, LocalConsistency};
use crate::rng::substream;
use crate::taskgen::{progress_reference, Dataset, DemoRole, FamilyRegistry, ACTION_DIM};

/// Stride between stored windows. With the window equal to the chunk length
/// this gives the finest progress alignment and makes resampling exact.
const BANK_STRIDE: usize = 1;

/// One entry per training demonstration, in dataset order, keyed by the
/// head embedding of the episode's pooled context.
pub fn build_memory_bank(dataset: &Dataset, registry: &FamilyRegistry, head: &PriorHead) -> Result<MemoryBank> {
    let mut bank = MemoryBank::new(head.embed_dim(), ACTION_DIM, dataset.horizon(), BANK_STRIDE)?;
    for (_, demo) in dataset.demos_with_role(DemoRole::Train) {
        bank.insert(MemoryEntry {
            key: head.embed(&pooled_context(registry, dataset, demo)?)?,
            trajectory: demo.trajectory.clone(),
            window: dataset.horizon(),
            stride: BANK_STRIDE,
            task_id: dataset.task_of(demo).id.clone(),
        })?;
    }
    if bank.is_empty() {
        return Err(Error::invalid("dataset has no training demonstrations"));
    }
    Ok(bank)
}

/// Replay a session along demonstration `demo`, exactly as an evaluation
/// episode would advance it, and pair each chunk's previous chunk with the
/// residual `A*_c − μ_c`. `exclude` hides one bank entry from retrieval.
pub fn demo_rollout(
    dataset: &Dataset,
    registry: &FamilyRegistry,
    bank: &MemoryBank,
    head: &PriorHead,
    gpm: GpmConfig,
    demo: usize,
    exclude: Option<usize>,
) -> Result<LcmRollout> {
    let d = &dataset.demos[demo];
    let h = dataset.horizon();
    let t_ref = progress_reference(registry, &dataset.task_of(d).descriptor.family, h)?;
    let query = head.embed(&dataset.chunk_context(registry, d, 0)?)?;
    let mut session = EpisodeSession::from_query(bank, query, gpm, t_ref, |i| Some(i) != exclude)?;
    let mut prev = ActionChunk::zeros(h, ACTION_DIM);
    let mut rollout = LcmRollout {
        prev_chunks: Vec::new(),
        targets: Vec::new(),
    };
    for c in 0..dataset.num_chunks(d) {
        let (prior, _) = session.step(h)?;
        let truth = dataset.chunk(d, c)?;
        rollout.prev_chunks.push(prev);
        rollout.targets.push(residual_target(&truth, &prior.mean)?);
        prev = truth;
    }
    Ok(rollout)
}

/// Rollouts for every training demonstration, each retrieving without its
/// own bank entry (the bank was built from the same demonstrations).
pub fn lcm_rollouts(dataset: &Dataset, registry: &FamilyRegistry, bank: &MemoryBank, head: &PriorHead, gpm: GpmConfig) -> Result<Vec<LcmRollout>> {
    use rayon::prelude::*;
    let train: Vec<usize> = dataset.demos_with_role(DemoRole::Train).map(|(i, _)| i).collect();
    train
        .par_iter()
        .enumerate()
        .map(|(entry, &demo)| demo_rollout(dataset, registry, bank, head, gpm, demo, Some(entry)))
        .collect()
}

pub struct Stage3Output {
    pub lcm: LocalConsistency,
    pub log: TrainLog,
}

#[allow(clippy::too_many_arguments)]
pub fn stage3_train(
    dataset: &Dataset,
    registry: &FamilyRegistry,
    bank: &MemoryBank,
    head: &PriorHead,
    gpm: GpmConfig,
    lcm_config: LcmConfig,
    config: &Stage3Config,
    seed: u64,
) -> Result<Stage3Output> {
    config.optim.validate("stage3")?;
    let rollouts = lcm_rollouts(dataset, registry, bank, head, gpm)?;
    let mut lcm = LocalConsistency::new(
        dataset.horizon(),
        ACTION_DIM,
        lcm_config,
        &dataset.suite_fingerprint,
        &mut substream(seed, "stage3/init"),
    )?;
    let mut rng = substream(seed, "stage3/batches");
    let mut log = TrainLog::new(3, seed, config.optim.smoothing);
    let model = lcm.clone();
    optimize(&mut lcm.store, &config.optim, &mut log, |_, store| {
        let batch: Vec<LcmRollout> = (0..config.optim.batch_size)
            .map(|_| rollouts[rng.random_range(0..rollouts.len())].clone())
            .collect();
        let masks = sample_cold_masks(&batch, lcm_config.p_cold, &mut rng);
        let loss = LcmLoss {
            model: &model,
            rollouts: &batch,
            masks: Some(&masks),
        };
        backward(&loss, store)
    })?;
    Ok(Stage3Output { lcm, log })
}
