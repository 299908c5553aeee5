//! Run configuration, read from TOML with one table per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gpm::GpmConfig;
use crate::lcm::LcmConfig;
use crate::taskgen::DataConfig;

/// Optimizer settings shared by all stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Fraction of `steps` over which the learning rate ramps linearly up.
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Trailing window of the smoothed loss.
    pub smoothing: usize,
    pub log_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            steps: 500,
            warmup_ratio: 0.0,
            weight_decay: 0.0,
            smoothing: 50,
            log_every: 100,
        }
    }
}

impl StageConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("[{stage}] lr must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("[{stage}] batch_size must be positive")));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("[{stage}] warmup_ratio must lie in [0, 1]")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("[{stage}] weight_decay must be non-negative")));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.steps as f64).ceil() as usize
    }

    /// Learning rate at a 0-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            self.lr * (step + 1) as f64 / w as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    #[serde(flatten)]
    pub optim: StageConfig,
    pub hidden: Vec<usize>,
    /// Standard deviation of normalized actions.
    pub action_spread: f64,
    /// Express chunks relative to the current position.
    pub relative_actions: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            optim: StageConfig {
                steps: 20000,
                warmup_ratio: 0.1,
                ..StageConfig::default()
            },
            hidden: vec![128, 128],
            action_spread: 0.5,
            relative_actions: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    #[serde(flatten)]
    pub optim: StageConfig,
    /// InfoNCE temperature `τ_c`.
    pub temperature: f64,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            optim: StageConfig::default(),
            temperature: 0.07,
            embed_dim: 16,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    #[serde(flatten)]
    pub optim: StageConfig,
}

/// Everything a full run depends on besides the seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub gpm: GpmConfig,
    pub lcm: LcmConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Parse a possibly partial file; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.optim.validate("stage1")?;
        self.stage2.optim.validate("stage2")?;
        self.stage3.optim.validate("stage3")?;
        if !(self.stage1.action_spread > 0.0 && self.stage1.action_spread.is_finite()) {
            return Err(Error::Config("[stage1] action_spread must be positive".into()));
        }
        if self.stage1.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("[stage1] hidden widths must be positive".into()));
        }
        if !(self.stage2.temperature > 0.0) {
            return Err(Error::Config("[stage2] temperature must be positive".into()));
        }
        if self.stage2.optim.batch_size % 2 != 0 {
            return Err(Error::Config("[stage2] batch_size must be even (task pairs)".into()));
        }
        if self.stage2.embed_dim == 0 || self.stage2.hidden == 0 {
            return Err(Error::Config("[stage2] embed_dim and hidden must be positive".into()));
        }
        let b = &self.gpm.bounds;
        if self.gpm.k == 0 || !(self.gpm.temperature > 0.0) || !(self.gpm.var_floor > 0.0) {
            return Err(Error::Config("[gpm] k, temperature and var_floor must be positive".into()));
        }
        if !(b.lambda_min <= b.lambda_max) || b.nfe_min == 0 || b.nfe_min > b.nfe_max {
            return Err(Error::Config("[gpm] need lambda_min <= lambda_max and 1 <= nfe_min <= nfe_max".into()));
        }
        if !(0.0..=1.0).contains(&self.lcm.p_cold) || self.lcm.feature_dim == 0 || self.lcm.state_dim == 0 {
            return Err(Error::Config("[lcm] p_cold must lie in [0, 1] and dims must be positive".into()));
        }
        self.eval.validate(b.nfe_max)?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
