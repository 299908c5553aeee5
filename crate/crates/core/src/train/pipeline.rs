//! All three stages plus bank construction, in order, from one seed.

use super::{build_memory_bank, stage1_train, stage2_train, stage3_train, MarginReport, PipelineConfig, TrainLog};
use crate::error::Result;
use crate::eval::PolicyStack;
use crate::flow::FlowPolicy;
use crate::gpm::{MemoryBank, PriorHead};
use crate::lcm::LocalConsistency;
use crate::rng::derive_seed;
use crate::taskgen::{build_dataset, Dataset, FamilyRegistry};

pub struct TrainedStack {
    pub dataset: Dataset,
    pub policy: FlowPolicy,
    pub head: PriorHead,
    pub bank: MemoryBank,
    pub lcm: LocalConsistency,
    pub margin: MarginReport,
    pub logs: [TrainLog; 3],
}

impl TrainedStack {
    pub fn stack(&self, config: &PipelineConfig) -> PolicyStack<'_> {
        PolicyStack {
            generator: &self.policy,
            memory: Some((&self.head, &self.bank)),
            lcm: Some(&self.lcm),
            gpm: config.gpm,
        }
    }
}

/// Seeds of each step, derived from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_seed(master, stage)
}

pub fn train_all(registry: &FamilyRegistry, config: &PipelineConfig, seed: u64) -> Result<TrainedStack> {
    config.validate()?;
    let dataset = build_dataset(registry, &config.data, stage_seed(seed, "data"))?;
    let s1 = stage1_train(&dataset, registry, &config.stage1, stage_seed(seed, "stage1"))?;
    let s2 = stage2_train(&dataset, registry, &config.stage2, stage_seed(seed, "stage2"))?;
    let bank = build_memory_bank(&dataset, registry, &s2.head)?;
    let s3 = stage3_train(
        &dataset,
        registry,
        &bank,
        &s2.head,
        config.gpm,
        config.lcm,
        &config.stage3,
        stage_seed(seed, "stage3"),
    )?;
    Ok(TrainedStack {
        dataset,
        policy: s1.policy,
        head: s2.head,
        bank,
        lcm: s3.lcm,
        margin: s2.margin,
        logs: [s1.log, s2.log, s3.log],
    })
}
