//! Synthetic planar task suite.
//!
//! Stands in for a robot, its demonstrations and its perception stack: task
//! families generate smooth 2-D expert trajectories, and a fixed featurizer
//! turns `(task, observation)` into the conditioning vector.

mod dataset;
mod families;

pub use dataset::{build_dataset, suite_fingerprint, DataConfig, Dataset, DemoRole, Demonstration, Split, TaskRecord};
pub use families::{min_jerk, FamilyRegistry, ParamRanges, TaskFamily, TaskParams, BASE_RANGES, PARAM_NAMES};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flow::ActionChunk;
use crate::rng::{standard_normal, substream};

pub const ACTION_DIM: usize = 2;
pub const OBSERVATION_DIM: usize = 4;
pub const PARAM_DIM: usize = 7;

pub type ContextVector = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub family: String,
    pub params: TaskParams,
    pub seed: u64,
}

/// Restriction on the goal's x coordinate, used to carve held-out regions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalBand {
    pub lo: f64,
    pub hi: f64,
}

/// Draw a task uniformly within the family's ranges.
pub fn sample_task(registry: &FamilyRegistry, family: &str, seed: u64) -> Result<TaskDescriptor> {
    sample_task_in(registry, family, seed, None)
}

/// As [`sample_task`], optionally restricting `goal_x` to a sub-band.
pub fn sample_task_in(registry: &FamilyRegistry, family: &str, seed: u64, band: Option<GoalBand>) -> Result<TaskDescriptor> {
    let fam = registry.get(family)?;
    let mut ranges = fam.ranges().0;
    if let Some(b) = band {
        let (lo, hi) = ranges[2];
        let (lo, hi) = (lo.max(b.lo), hi.min(b.hi));
        if lo > hi {
            return Err(Error::invalid(format!("goal band [{}, {}] misses family {family}", b.lo, b.hi)));
        }
        ranges[2] = (lo, hi);
    }
    let mut rng = substream(seed, "task-params");
    let mut v = [0.0; PARAM_DIM];
    for (x, &(lo, hi)) in v.iter_mut().zip(ranges.iter()) {
        *x = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    Ok(TaskDescriptor {
        family: family.to_string(),
        params: TaskParams::from_array(v),
        seed,
    })
}

pub fn check_task(registry: &FamilyRegistry, task: &TaskDescriptor) -> Result<()> {
    let fam = registry.get(&task.family)?;
    for ((name, v), (lo, hi)) in PARAM_NAMES.iter().zip(task.params.to_array()).zip(fam.ranges().0) {
        if !(lo..=hi).contains(&v) {
            return Err(Error::invalid(format!("{name}={v} outside [{lo}, {hi}] for {}", task.family)));
        }
    }
    Ok(())
}

/// Zero-mean Gaussian perturbation of expert positions. Each action dimension
/// follows a stationary AR(1) process with marginal standard deviation `std`
/// and lag-one correlation `correlation`, so one demonstration drifts
/// persistently to one side of the nominal path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemoNoise {
    pub std: f64,
    pub correlation: f64,
}

impl DemoNoise {
    pub const NONE: DemoNoise = DemoNoise { std: 0.0, correlation: 0.0 };

    pub fn check(&self) -> Result<()> {
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::invalid("noise std must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::invalid("noise correlation must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Expert trajectory of `t_len` positions along the family path, timed by a
/// minimum-jerk profile, plus noise drawn from a stream keyed by `noise_seed`.
pub fn expert_trajectory(
    registry: &FamilyRegistry,
    task: &TaskDescriptor,
    t_len: usize,
    noise: DemoNoise,
    noise_seed: u64,
) -> Result<ActionChunk> {
    check_task(registry, task)?;
    noise.check()?;
    if t_len < 2 {
        return Err(Error::invalid("trajectory needs at least two steps"));
    }
    let fam = registry.get(&task.family)?;
    let mut rng = substream(noise_seed, "expert-noise");
    let innovation = (1.0 - noise.correlation * noise.correlation).sqrt();
    let mut eps = [0.0; ACTION_DIM];
    let mut data = Vec::with_capacity(t_len * ACTION_DIM);
    for i in 0..t_len {
        let tau = i as f64 / (t_len - 1) as f64;
        let p = fam.path(&task.params, min_jerk(tau));
        for (d, x) in p.into_iter().enumerate() {
            if noise.std > 0.0 {
                let z = standard_normal(&mut rng);
                eps[d] = if i == 0 { noise.std * z } else { noise.correlation * eps[d] + innovation * noise.std * z };
            }
            data.push(x + eps[d]);
        }
    }
    ActionChunk::new(t_len, ACTION_DIM, data)
}

/// Observation at a position: `[x, y, goal_x − x, goal_y − y]`.
pub fn observe(task: &TaskDescriptor, position: &[f64]) -> Result<Vec<f64>> {
    check_dim("observation position", ACTION_DIM, position.len())?;
    let g = task.params.goal;
    Ok(vec![position[0], position[1], g[0] - position[0], g[1] - position[1]])
}

/// Executed actions that precede the final chunk of an episode, `T − H`. Used
/// as the progress reference so that `ρ` reaches 1 exactly when the last
/// window of a length-`T` trajectory is due.
pub fn progress_reference(registry: &FamilyRegistry, family: &str, horizon: usize) -> Result<f64> {
    let t_len = registry.get(family)?.episode_len();
    Ok(t_len.saturating_sub(horizon).max(horizon) as f64)
}

/// Offset of the current position inside a context vector.
pub fn position_offset(registry: &FamilyRegistry) -> usize {
    registry.len() + PARAM_DIM
}

pub fn context_dim(registry: &FamilyRegistry) -> usize {
    registry.len() + PARAM_DIM + OBSERVATION_DIM
}

/// `[family one-hot | parameters scaled to [−1, 1] | observation]`.
/// Parameters with a degenerate range map to 0.
pub fn featurize(registry: &FamilyRegistry, task: &TaskDescriptor, observation: &[f64]) -> Result<ContextVector> {
    check_dim("observation", OBSERVATION_DIM, observation.len())?;
    let idx = registry.index_of(&task.family).ok_or_else(|| Error::Unknown {
        kind: "task family",
        name: task.family.clone(),
    })?;
    let fam = registry.get(&task.family)?;
    let mut out = vec![0.0; registry.len()];
    out[idx] = 1.0;
    for (v, (lo, hi)) in task.params.to_array().into_iter().zip(fam.ranges().0) {
        out.push(if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 });
    }
    out.extend_from_slice(observation);
    Ok(out)
}
