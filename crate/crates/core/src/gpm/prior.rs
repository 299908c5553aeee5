//! Retrieval weights, progress-aligned chunk extraction and moment-matched priors.

use super::bank::{MemoryEntry, Neighbor};
use super::schedule::SamplerSchedule;
use crate::error::{Error, Result};
use crate::flow::ActionChunk;
use crate::nn::linalg::softmax;
use crate::rng::{standard_normal, Rng};

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Retrieved neighbors with their softmax weights and the weighted mean score `s̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub neighbors: Vec<Neighbor>,
    pub weights: Vec<f64>,
    pub similarity: f64,
}

impl RetrievalResult {
    pub fn from_neighbors(neighbors: Vec<Neighbor>, temperature: f64) -> Result<Self> {
        let scores: Vec<f64> = neighbors.iter().map(|n| n.score).collect();
        let (weights, similarity) = weights_and_similarity(&scores, temperature)?;
        Ok(Self {
            neighbors,
            weights,
            similarity,
        })
    }
}

/// `α = softmax(s/τ)` and `s̄ = Σ α_i s_i`.
pub fn weights_and_similarity(scores: &[f64], temperature: f64) -> Result<(Vec<f64>, f64)> {
    if scores.is_empty() {
        return Err(Error::invalid("no retrieval scores"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("retrieval score".into()));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let weights = softmax(&scaled);
    let similarity = weights.iter().zip(scores).map(|(a, s)| a * s).sum();
    Ok((weights, similarity))
}

/// Absorbs rounding in accumulated progress so that `ρ (N_chunks − 1)` landing
/// a few ulps below an integer still selects that window.
const INDEX_SLACK: f64 = 1e-9;

/// The `H₀ × A` window of `entry` selected by progress `ρ`:
/// window `u = ⌊ρ (N_chunks − 1)⌋`, rows `[uΔ, uΔ + H₀)`.
pub fn extract_aligned_chunk(entry: &MemoryEntry, progress: f64) -> Result<ActionChunk> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::invalid(format!("progress {progress} outside [0, 1]")));
    }
    let last = entry.window_count() - 1;
    let u = ((progress * last as f64 + INDEX_SLACK).floor() as usize).min(last);
    let start = u * entry.stride;
    let traj = &entry.trajectory;
    let a = traj.cols();
    ActionChunk::new(
        entry.window,
        a,
        traj.as_slice()[start * a..(start + entry.window) * a].to_vec(),
    )
}

/// Piecewise-linear resampling of a block's rows onto `horizon` uniformly
/// spaced points spanning the first to the last row. A one-row block is
/// repeated; a one-point target takes the first row.
pub fn resample_chunk(block: &ActionChunk, horizon: usize) -> Result<ActionChunk> {
    if horizon == 0 {
        return Err(Error::invalid("resample target horizon must be at least 1"));
    }
    let (h0, a) = block.shape();
    if horizon == h0 {
        return Ok(block.clone());
    }
    let mut data = Vec::with_capacity(horizon * a);
    for j in 0..horizon {
        let pos = if horizon == 1 || h0 == 1 {
            0.0
        } else {
            j as f64 * (h0 - 1) as f64 / (horizon - 1) as f64
        };
        let i = (pos.floor() as usize).min(h0 - 1);
        let frac = pos - i as f64;
        for c in 0..a {
            let lo = block.get(i, c);
            let v = if i + 1 < h0 && frac > 0.0 {
                lo + frac * (block.get(i + 1, c) - lo)
            } else {
                lo
            };
            data.push(v);
        }
    }
    ActionChunk::new(horizon, a, data)
}

/// Moment-matched diagonal Gaussian over a chunk, with the retrieval confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrior {
    pub mean: ActionChunk,
    pub var: ActionChunk,
    pub similarity: f64,
}

/// Weighted mean and (unfloored) weighted variance of equally shaped chunks.
pub fn weighted_moments(chunks: &[ActionChunk], weights: &[f64]) -> Result<(ActionChunk, ActionChunk)> {
    let first = chunks.first().ok_or_else(|| Error::invalid("no chunks to compose"))?;
    if chunks.len() != weights.len() {
        return Err(Error::invalid(format!("{} chunks but {} weights", chunks.len(), weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid(format!("weights must form a simplex, sum is {total}")));
    }
    let (h, a) = first.shape();
    let mut mean = vec![0.0; h * a];
    for (c, w) in chunks.iter().zip(weights) {
        if c.shape() != (h, a) {
            return Err(Error::ShapeMismatch {
                context: "compose_prior",
                left: (h, a),
                right: c.shape(),
            });
        }
        for (m, v) in mean.iter_mut().zip(c.as_slice()) {
            *m += w * v;
        }
    }
    let mut var = vec![0.0; h * a];
    for (c, w) in chunks.iter().zip(weights) {
        for ((s, v), m) in var.iter_mut().zip(c.as_slice()).zip(&mean) {
            let d = v - m;
            *s += w * d * d;
        }
    }
    Ok((ActionChunk::new(h, a, mean)?, ActionChunk::new(h, a, var)?))
}

/// `μ = Σ α_i C_i`, `Var = max(Σ α_i (C_i − μ)², σ²_min)`.
pub fn compose_prior(chunks: &[ActionChunk], weights: &[f64], similarity: f64, var_floor: f64) -> Result<TaskPrior> {
    if !(var_floor > 0.0) {
        return Err(Error::invalid("variance floor must be positive"));
    }
    let (mean, var) = weighted_moments(chunks, weights)?;
    Ok(TaskPrior {
        mean,
        var: var.map(|v| v.max(var_floor)),
        similarity,
    })
}

/// `X̂ = μ + λ (ε ⊙ √Var)` with `ε ~ N(0, I)`.
pub fn sample_prior_init(prior: &TaskPrior, schedule: &SamplerSchedule, rng: &mut Rng) -> ActionChunk {
    let lambda = schedule.noise_scale;
    let (h, a) = prior.mean.shape();
    let data = prior
        .mean
        .as_slice()
        .iter()
        .zip(prior.var.as_slice())
        .map(|(m, v)| m + lambda * (standard_normal(rng) * v.sqrt()))
        .collect();
    ActionChunk::new(h, a, data).expect("prior mean and variance share a shape")
}
