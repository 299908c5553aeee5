//! Local consistency memory.
//!
//! The previous executed chunk is embedded row by row, passed through one
//! self-attention block, mean-pooled and fed to a gated recurrent state. A
//! bias-free linear decoder maps the new state to an `H × A` residual that is
//! added to the prior-sampled ODE start.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ActionChunk;
use crate::nn::linalg::affine;
use crate::nn::{
    Activation, AttentionCache, BlockKind, Checkpoint, DenseBlockSpec, Gradients, GruCache, GruCell, LossGraph, Mlp,
    MlpCache, ParamStore, SelfAttention,
};
use crate::rng::Rng;

/// Residual added to the prior sample, in action units.
pub type ConsistencyBias = ActionChunk;

const DECODER: &str = "lcm.decoder.w";

#[derive(Clone, Debug, PartialEq)]
pub struct LcmState {
    hidden: Vec<f64>,
    fresh: bool,
}

impl LcmState {
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    /// True until the first update after a reset.
    pub fn is_fresh(&self) -> bool {
        self.fresh
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LcmConfig {
    pub feature_dim: usize,
    pub state_dim: usize,
    /// Probability of zero-masking the previous chunk during training.
    pub p_cold: f64,
}

impl Default for LcmConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            state_dim: 32,
            p_cold: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LcmArch {
    horizon: usize,
    action_dim: usize,
    config: LcmConfig,
    embed: Mlp,
    attention: SelfAttention,
    cell: GruCell,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalConsistency {
    arch: LcmArch,
    pub store: ParamStore,
    pub suite_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct LcmMeta {
    kind: String,
    arch: LcmArch,
    suite_fingerprint: String,
}

/// Per-step record kept between the forward and backward pass.
pub struct StepTape {
    embeds: Vec<MlpCache>,
    attention: AttentionCache,
    cell: GruCache,
    hidden: Vec<f64>,
    resid: Vec<f64>,
}

impl LocalConsistency {
    pub fn new(horizon: usize, action_dim: usize, config: LcmConfig, suite_fingerprint: &str, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.p_cold) {
            return Err(Error::invalid("p_cold must lie in [0, 1]"));
        }
        let embed = Mlp::new(
            "lcm.embed",
            DenseBlockSpec {
                kind: BlockKind::Mlp,
                widths: vec![action_dim, config.feature_dim],
                activation: Activation::Linear,
            },
        )?;
        let attention = SelfAttention::new("lcm.attn", config.feature_dim, config.feature_dim)?;
        let cell = GruCell::new("lcm.cell", config.feature_dim, config.state_dim)?;
        let mut store = ParamStore::new();
        embed.init(&mut store, rng)?;
        attention.init(&mut store, rng)?;
        cell.init(&mut store, rng)?;
        store.insert_uniform(DECODER, &[horizon * action_dim, config.state_dim], config.state_dim, rng)?;
        Ok(Self {
            arch: LcmArch {
                horizon,
                action_dim,
                config,
                embed,
                attention,
                cell,
            },
            store,
            suite_fingerprint: suite_fingerprint.to_string(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.arch.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.arch.action_dim
    }

    pub fn config(&self) -> LcmConfig {
        self.arch.config
    }

    pub fn decoder(&self) -> &[f64] {
        self.store.get(DECODER)
    }

    pub fn decoder_mut(&mut self) -> &mut [f64] {
        self.store.get_mut(DECODER)
    }

    pub fn reset_state(&self) -> LcmState {
        LcmState {
            hidden: self.arch.cell.reset_state(),
            fresh: true,
        }
    }

    fn check_chunk(&self, chunk: &ActionChunk) -> Result<()> {
        if chunk.shape() != (self.arch.horizon, self.arch.action_dim) {
            return Err(Error::ShapeMismatch {
                context: "lcm previous chunk",
                left: (self.arch.horizon, self.arch.action_dim),
                right: chunk.shape(),
            });
        }
        Ok(())
    }

    fn features_cached(&self, prev: &ActionChunk) -> Result<(Vec<Vec<f64>>, Vec<MlpCache>, AttentionCache)> {
        self.features_with(&self.store, prev)
    }

    fn features_with(&self, store: &ParamStore, prev: &ActionChunk) -> Result<(Vec<Vec<f64>>, Vec<MlpCache>, AttentionCache)> {
        self.check_chunk(prev)?;
        let mut tokens = Vec::with_capacity(prev.rows());
        let mut embeds = Vec::with_capacity(prev.rows());
        for row in prev.iter_rows() {
            let (tok, cache) = self.arch.embed.forward_cached(store, row)?;
            tokens.push(tok);
            embeds.push(cache);
        }
        let (features, attention) = self.arch.attention.forward_cached(store, &tokens)?;
        Ok((features, embeds, attention))
    }

    /// Per-step features (`H × D_f`) of the previous chunk.
    pub fn consistency_forward(&self, prev: &ActionChunk) -> Result<Vec<Vec<f64>>> {
        Ok(self.features_cached(prev)?.0)
    }

    /// Pool features, update the recurrent state and decode the bias.
    pub fn step(&self, state: &LcmState, features: &[Vec<f64>]) -> Result<(LcmState, ConsistencyBias)> {
        let pooled = crate::gpm::mean_pool(features)?;
        let (hidden, _) = self.arch.cell.step(&self.store, &state.hidden, &pooled)?;
        let bias = self.decode(&hidden)?;
        Ok((LcmState { hidden, fresh: false }, bias))
    }

    fn decode(&self, hidden: &[f64]) -> Result<ConsistencyBias> {
        self.decode_with(&self.store, hidden)
    }

    fn decode_with(&self, store: &ParamStore, hidden: &[f64]) -> Result<ConsistencyBias> {
        let flat = affine(store.get(DECODER), &[], hidden, self.arch.horizon * self.arch.action_dim);
        ActionChunk::new(self.arch.horizon, self.arch.action_dim, flat)
    }

    /// Features and state update in one call.
    pub fn predict(&self, state: &LcmState, prev: &ActionChunk) -> Result<(LcmState, ConsistencyBias)> {
        let features = self.consistency_forward(prev)?;
        self.step(state, &features)
    }

    /// Bias produced at episode start: zero previous chunk, reset state.
    pub fn cold_start_bias(&self) -> Result<(LcmState, ConsistencyBias)> {
        self.predict(&self.reset_state(), &ActionChunk::zeros(self.arch.horizon, self.arch.action_dim))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = LcmMeta {
            kind: "lcm".into(),
            arch: self.arch.clone(),
            suite_fingerprint: self.suite_fingerprint.clone(),
        };
        Ok(Checkpoint::new(serde_json::to_value(meta)?, self.store.clone()))
    }

    pub fn from_checkpoint(ck: Checkpoint, expected_suite: Option<&str>) -> Result<Self> {
        let meta: LcmMeta = serde_json::from_value(ck.meta).map_err(|e| Error::corrupt("lcm checkpoint", e.to_string()))?;
        if meta.kind != "lcm" {
            return Err(Error::corrupt("lcm checkpoint", format!("kind is {}", meta.kind)));
        }
        if let Some(expected) = expected_suite {
            if expected != meta.suite_fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: meta.suite_fingerprint,
                    actual: expected.to_string(),
                });
            }
        }
        Ok(Self {
            arch: meta.arch,
            store: ck.store,
            suite_fingerprint: meta.suite_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, expected_suite: Option<&str>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, expected_suite)
    }
}

/// `B* = A* − μ`.
pub fn residual_target(ground_truth: &ActionChunk, prior_mean: &ActionChunk) -> Result<ConsistencyBias> {
    ground_truth.zip_with(prior_mean, "residual_target", |a, m| a - m)
}

/// `X = X̂ + B`.
pub fn inject_bias(prior_sample: &ActionChunk, bias: &ConsistencyBias) -> Result<ActionChunk> {
    prior_sample.zip_with(bias, "inject_bias", |x, b| x + b)
}

/// One unrolled training episode: previous chunks and bias targets in order.
#[derive(Clone, Debug, PartialEq)]
pub struct LcmRollout {
    pub prev_chunks: Vec<ActionChunk>,
    pub targets: Vec<ConsistencyBias>,
}

/// Draw per-step cold-start masks with probability `p_cold`.
pub fn sample_cold_masks(rollouts: &[LcmRollout], p_cold: f64, rng: &mut Rng) -> Vec<Vec<bool>> {
    use rand::Rng as _;
    rollouts
        .iter()
        .map(|r| r.prev_chunks.iter().map(|_| p_cold > 0.0 && rng.random_bool(p_cold)).collect())
        .collect()
}

/// Mean over rollouts, steps and entries of `(B_t − B*_t)²`, with the state
/// carried across the steps of each rollout and reset between rollouts.
pub struct LcmLoss<'a> {
    pub model: &'a LocalConsistency,
    pub rollouts: &'a [LcmRollout],
    /// `masks[r][t]` zeroes the previous chunk of step `t` in rollout `r`.
    pub masks: Option<&'a [Vec<bool>]>,
}

impl LcmLoss<'_> {
    fn entries(&self) -> usize {
        let per = self.model.arch.horizon * self.model.arch.action_dim;
        self.rollouts.iter().map(|r| r.targets.len() * per).sum()
    }
}

impl LossGraph for LcmLoss<'_> {
    type Tape = Vec<Vec<StepTape>>;

    fn forward(&self, store: &ParamStore) -> Result<(Vec<f64>, Self::Tape)> {
        let total_entries = self.entries();
        if total_entries == 0 {
            return Err(Error::invalid("lcm loss over an empty rollout"));
        }
        let model = self.model;
        let (h, a) = (model.arch.horizon, model.arch.action_dim);
        let zeros = ActionChunk::zeros(h, a);
        let mut sum = 0.0;
        let mut tape = Vec::with_capacity(self.rollouts.len());
        for (r, rollout) in self.rollouts.iter().enumerate() {
            if rollout.prev_chunks.len() != rollout.targets.len() {
                return Err(Error::invalid("rollout needs one target per previous chunk"));
            }
            let mut hidden = model.arch.cell.reset_state();
            let mut steps = Vec::with_capacity(rollout.targets.len());
            for (t, (prev, target)) in rollout.prev_chunks.iter().zip(&rollout.targets).enumerate() {
                let masked = self.masks.is_some_and(|m| m[r][t]);
                let input = if masked { &zeros } else { prev };
                let (features, embeds, attention) = model.features_with(store, input)?;
                let pooled = crate::gpm::mean_pool(&features)?;
                let (next, cell) = model.arch.cell.step_cached(store, &hidden, &pooled)?;
                let bias = model.decode_with(store, &next)?;
                if target.shape() != bias.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "lcm target",
                        left: bias.shape(),
                        right: target.shape(),
                    });
                }
                let resid: Vec<f64> = bias.as_slice().iter().zip(target.as_slice()).map(|(b, y)| b - y).collect();
                sum += resid.iter().map(|e| e * e).sum::<f64>();
                steps.push(StepTape {
                    embeds,
                    attention,
                    cell,
                    hidden: next.clone(),
                    resid,
                });
                hidden = next;
            }
            tape.push(steps);
        }
        Ok((vec![sum / total_entries as f64], tape))
    }

    fn backward(&self, store: &ParamStore, tape: Self::Tape, seed: &[f64], grads: &mut Gradients) -> Result<()> {
        let arch = &self.model.arch;
        let scale = 2.0 * seed[0] / self.entries() as f64;
        let decoder = store.get(DECODER);
        for steps in tape {
            let mut dh_next = vec![0.0; arch.config.state_dim];
            for step in steps.into_iter().rev() {
                let dbias: Vec<f64> = step.resid.iter().map(|r| scale * r).collect();
                let mut dh = dh_next;
                crate::nn::linalg::affine_backward(decoder, &step.hidden, &dbias, grads.slot(DECODER), None, Some(&mut dh));
                let (dh_prev, dpooled) = arch.cell.backward(store, &step.cell, &dh, grads);
                let n = step.embeds.len() as f64;
                let dfeatures: Vec<Vec<f64>> = (0..step.embeds.len())
                    .map(|_| dpooled.iter().map(|g| g / n).collect())
                    .collect();
                let dtokens = arch.attention.backward(store, &step.attention, &dfeatures, grads);
                for (cache, dtok) in step.embeds.iter().zip(&dtokens) {
                    arch.embed.backward(store, cache, dtok, grads);
                }
                dh_next = dh_prev;
            }
        }
        Ok(())
    }
}
