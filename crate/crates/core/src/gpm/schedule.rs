//! Similarity-adaptive noise scale and step count.
//!
//! Both schedules map the retrieval confidence `s̄ ∈ [−1, 1]` through
//! `w = (s̄ + 1)/2`: high confidence shrinks the noise toward `λ_min` and the
//! step count toward `N_min`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack tolerated outside `[−1, 1]` before a confidence is rejected.
pub const SIMILARITY_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub nfe_min: usize,
    pub nfe_max: usize,
}

impl Default for ScheduleBounds {
    fn default() -> Self {
        Self {
            lambda_min: 0.05,
            lambda_max: 1.0,
            nfe_min: 2,
            nfe_max: 10,
        }
    }
}

impl ScheduleBounds {
    pub fn schedule(&self, similarity: f64) -> Result<SamplerSchedule> {
        Ok(SamplerSchedule {
            noise_scale: noise_schedule(similarity, self.lambda_min, self.lambda_max)?,
            nfe: nfe_schedule(similarity, self.nfe_min, self.nfe_max)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    pub noise_scale: f64,
    pub nfe: usize,
}

fn confidence_weight(similarity: f64) -> Result<f64> {
    if !similarity.is_finite() || similarity.abs() > 1.0 + SIMILARITY_SLACK {
        return Err(Error::invalid(format!("similarity {similarity} outside [-1, 1]")));
    }
    let clamped = similarity.clamp(-1.0, 1.0);
    if clamped != similarity {
        log::warn!("similarity {similarity} clamped to [-1, 1]");
    }
    Ok((clamped + 1.0) / 2.0)
}

/// `λ = λ_max − ((s̄+1)/2)(λ_max − λ_min)`, evaluated as the convex
/// combination `w·λ_min + (1 − w)·λ_max` so both endpoints are exact.
pub fn noise_schedule(similarity: f64, lambda_min: f64, lambda_max: f64) -> Result<f64> {
    if !(lambda_min <= lambda_max) {
        return Err(Error::invalid("lambda_min must not exceed lambda_max"));
    }
    let w = confidence_weight(similarity)?;
    Ok(w * lambda_min + (1.0 - w) * lambda_max)
}

/// `N_min + (1 − (s̄+1)/2)(N_max − N_min)` before rounding.
pub fn nfe_schedule_unrounded(similarity: f64, nfe_min: usize, nfe_max: usize) -> Result<f64> {
    if nfe_min < 1 || nfe_min > nfe_max {
        return Err(Error::invalid(format!("need 1 <= N_min <= N_max, got {nfe_min}, {nfe_max}")));
    }
    let w = confidence_weight(similarity)?;
    Ok(nfe_min as f64 + (1.0 - w) * (nfe_max - nfe_min) as f64)
}

/// Rounded (half away from zero) step count, always in `[N_min, N_max]`.
pub fn nfe_schedule(similarity: f64, nfe_min: usize, nfe_max: usize) -> Result<usize> {
    let raw = nfe_schedule_unrounded(similarity, nfe_min, nfe_max)?;
    Ok((raw.round() as usize).clamp(nfe_min, nfe_max))
}
