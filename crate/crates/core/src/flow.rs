//! Conditional flow matching on action chunks: the straight-line path, its
//! constant target velocity, the regression loss and a fixed-step Euler
//! sampler whose step count is the number of velocity evaluations (NFE).

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, DenseBlockSpec, Gradients, LossGraph, Mlp, MlpCache, ParamStore};
use crate::rng::Rng;

/// An `H × A` block of consecutive actions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("action chunk needs H >= 1 and A >= 1"));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "action chunk {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action chunk".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| crate::rng::standard_normal(rng)).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    fn check_same(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Self, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, context)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "chunk add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "chunk sub", |a, b| a - b)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A point on the straight path between a source and a target chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: ActionChunk,
    pub x1: ActionChunk,
    pub t: f64,
    pub x_t: ActionChunk,
}

impl FlowSample {
    pub fn new(x0: ActionChunk, x1: ActionChunk, t: f64) -> Result<Self> {
        let x_t = ot_interpolate(&x0, &x1, t)?;
        Ok(Self { x0, x1, t, x_t })
    }
}

/// `(1 − t)·x0 + t·x1`.
pub fn ot_interpolate(x0: &ActionChunk, x1: &ActionChunk, t: f64) -> Result<ActionChunk> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("path time {t} outside [0, 1]")));
    }
    x0.zip_with(x1, "ot_interpolate", |a, b| (1.0 - t) * a + t * b)
}

/// Constant velocity of the straight path, `x1 − x0`.
pub fn target_velocity(x0: &ActionChunk, x1: &ActionChunk) -> Result<ActionChunk> {
    x0.zip_with(x1, "target_velocity", |a, b| b - a)
}

/// Counts velocity-network evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NfeMeter {
    count: u64,
}

impl NfeMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self) {
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// A time-dependent, context-conditioned vector field over action chunks.
/// Implementations must call [`NfeMeter::record`] once per evaluation.
pub trait VelocityField {
    fn velocity(&self, t: f64, x: &ActionChunk, context: &[f64], meter: &mut NfeMeter) -> Result<ActionChunk>;
}

/// Adapter turning a closure into a metered field.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(f64, &ActionChunk, &[f64]) -> ActionChunk,
{
    fn velocity(&self, t: f64, x: &ActionChunk, context: &[f64], meter: &mut NfeMeter) -> Result<ActionChunk> {
        meter.record();
        Ok((self.0)(t, x, context))
    }
}

/// Forward Euler from t = 0 to t = 1 in `steps` uniform steps.
pub fn euler_integrate(
    field: &dyn VelocityField,
    context: &[f64],
    x_init: &ActionChunk,
    steps: usize,
    meter: &mut NfeMeter,
) -> Result<ActionChunk> {
    if steps < 1 {
        return Err(Error::invalid("Euler integration needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x_init.clone();
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = field.velocity(t, &x, context, meter)?;
        x = x.zip_with(&v, "euler step", |xi, vi| xi + dt * vi)?;
    }
    Ok(x)
}

/// Velocity network `v_θ(t, x_t, context)`. An MLP over
/// `[t·flatten(x_t), t, sin 2πt, cos 2πt, context]` predicts the chunk endpoint
/// `D`, and the velocity is `(D − x_t) / max(1 − t, TIME_FLOOR)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    pub horizon: usize,
    pub action_dim: usize,
    pub context_dim: usize,
    mlp: Mlp,
}

pub const TIME_FEATURES: usize = 3;

/// Lower bound on the remaining time `1 − t` in the velocity parameterization.
pub const TIME_FLOOR: f64 = 0.05;

fn remaining(t: f64) -> f64 {
    (1.0 - t).max(TIME_FLOOR)
}

impl VelocityNet {
    pub fn new(horizon: usize, action_dim: usize, context_dim: usize, hidden: &[usize]) -> Result<Self> {
        let flat = horizon * action_dim;
        let mut widths = vec![flat + TIME_FEATURES + context_dim];
        widths.extend_from_slice(hidden);
        widths.push(flat);
        Ok(Self {
            horizon,
            action_dim,
            context_dim,
            mlp: Mlp::new("velocity", DenseBlockSpec::mlp(&widths))?,
        })
    }

    pub fn spec(&self) -> &DenseBlockSpec {
        self.mlp.spec()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.mlp.init(store, rng)
    }

    fn input(&self, t: f64, x: &ActionChunk, context: &[f64]) -> Result<Vec<f64>> {
        if x.shape() != (self.horizon, self.action_dim) {
            return Err(Error::ShapeMismatch {
                context: "velocity input",
                left: (self.horizon, self.action_dim),
                right: x.shape(),
            });
        }
        crate::error::check_dim("velocity context", self.context_dim, context.len())?;
        let mut input = Vec::with_capacity(self.spec().input_dim());
        input.extend(x.as_slice().iter().map(|v| t * v));
        input.extend_from_slice(&[t, (TAU * t).sin(), (TAU * t).cos()]);
        input.extend_from_slice(context);
        Ok(input)
    }

    pub fn forward(&self, store: &ParamStore, t: f64, x: &ActionChunk, context: &[f64]) -> Result<ActionChunk> {
        let (v, _) = self.forward_cached(store, t, x, context)?;
        ActionChunk::new(self.horizon, self.action_dim, v)
    }

    fn forward_cached(&self, store: &ParamStore, t: f64, x: &ActionChunk, context: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let (endpoint, cache) = self.mlp.forward_cached(store, &self.input(t, x, context)?)?;
        let r = remaining(t);
        let v = endpoint.iter().zip(x.as_slice()).map(|(d, xi)| (d - xi) / r).collect();
        Ok((v, cache))
    }
}

/// One training tuple for the flow-matching regression.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmItem {
    pub context: Vec<f64>,
    pub x0: ActionChunk,
    pub x1: ActionChunk,
    pub t: f64,
}

/// Mean over batch and entries of `(v_θ(t, x_t, c) − (x1 − x0))²`, with
/// `v_θ = (D_θ − x_t) / (1 − t)`.
pub struct CfmLoss<'a> {
    pub net: &'a VelocityNet,
    pub batch: &'a [CfmItem],
}

impl LossGraph for CfmLoss<'_> {
    type Tape = Vec<(Vec<f64>, MlpCache)>;

    fn forward(&self, store: &ParamStore) -> Result<(Vec<f64>, Self::Tape)> {
        if self.batch.is_empty() {
            return Err(Error::invalid("flow-matching loss over an empty batch"));
        }
        let denom = (self.batch.len() * self.net.horizon * self.net.action_dim) as f64;
        let mut total = 0.0;
        let mut tape = Vec::with_capacity(self.batch.len());
        for item in self.batch {
            let x_t = ot_interpolate(&item.x0, &item.x1, item.t)?;
            let target = target_velocity(&item.x0, &item.x1)?;
            let (pred, cache) = self.net.forward_cached(store, item.t, &x_t, &item.context)?;
            let resid: Vec<f64> = pred.iter().zip(target.as_slice()).map(|(p, u)| p - u).collect();
            total += resid.iter().map(|r| r * r).sum::<f64>();
            tape.push((resid, cache));
        }
        Ok((vec![total / denom], tape))
    }

    fn backward(&self, store: &ParamStore, tape: Self::Tape, seed: &[f64], grads: &mut Gradients) -> Result<()> {
        let denom = (self.batch.len() * self.net.horizon * self.net.action_dim) as f64;
        let scale = 2.0 * seed[0] / denom;
        for ((resid, cache), item) in tape.into_iter().zip(self.batch) {
            let scale = scale / remaining(item.t);
            let dout: Vec<f64> = resid.iter().map(|r| scale * r).collect();
            self.net.mlp.backward(store, &cache, &dout, grads);
        }
        Ok(())
    }
}

/// Per-action-dimension affine normalization to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(action_dim: usize) -> Self {
        Self {
            mean: vec![0.0; action_dim],
            std: vec![1.0; action_dim],
        }
    }

    /// Fit from action rows pooled over every chunk.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, action_dim: usize) -> Result<Self> {
        let mut sum = vec![0.0; action_dim];
        let mut sq = vec![0.0; action_dim];
        let mut n = 0usize;
        for row in rows {
            crate::error::check_dim("normalizer row", action_dim, row.len())?;
            for d in 0..action_dim {
                sum[d] += row[d];
                sq[d] += row[d] * row[d];
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit a normalizer on no data"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..action_dim)
            .map(|d| (sq[d] / n as f64 - mean[d] * mean[d]).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    /// Rescale so that normalized data has standard deviation `spread`.
    pub fn with_spread(mut self, spread: f64) -> Result<Self> {
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(Error::invalid(format!("action spread {spread} must be positive")));
        }
        for s in &mut self.std {
            *s /= spread;
        }
        Ok(self)
    }

    pub fn normalize(&self, chunk: &ActionChunk) -> ActionChunk {
        let (h, a) = chunk.shape();
        let data = (0..h * a).map(|i| (chunk.as_slice()[i] - self.mean[i % a]) / self.std[i % a]).collect();
        ActionChunk { rows: h, cols: a, data }
    }

    pub fn denormalize(&self, chunk: &ActionChunk) -> ActionChunk {
        let (h, a) = chunk.shape();
        let data = (0..h * a).map(|i| chunk.as_slice()[i] * self.std[i % a] + self.mean[i % a]).collect();
        ActionChunk { rows: h, cols: a, data }
    }
}

/// Trained velocity network with its normalization and suite binding.
///
/// With `anchor = Some(i)`, context entries `i..i + A` hold the current
/// position and the network works on chunks expressed relative to it.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPolicy {
    pub net: VelocityNet,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    pub anchor: Option<usize>,
    pub suite_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    kind: String,
    net: VelocityNet,
    normalizer: Normalizer,
    #[serde(default)]
    anchor: Option<usize>,
    suite_fingerprint: String,
}

/// Subtract (`sign = -1`) or add (`sign = 1`) the anchor row from every row.
fn shift(chunk: &ActionChunk, anchor: &[f64], sign: f64) -> ActionChunk {
    let a = chunk.cols();
    let data = chunk.as_slice().iter().enumerate().map(|(i, v)| v + sign * anchor[i % a]).collect();
    ActionChunk {
        rows: chunk.rows(),
        cols: a,
        data,
    }
}

impl FlowPolicy {
    pub fn horizon(&self) -> usize {
        self.net.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.net.action_dim
    }

    fn anchor_row<'c>(&self, context: &'c [f64]) -> Result<Option<&'c [f64]>> {
        match self.anchor {
            None => Ok(None),
            Some(i) => context
                .get(i..i + self.action_dim())
                .map(Some)
                .ok_or_else(|| Error::invalid(format!("anchor slot {i} outside a context of {}", context.len()))),
        }
    }

    /// Action units to network units.
    pub fn encode(&self, context: &[f64], chunk: &ActionChunk) -> Result<ActionChunk> {
        Ok(match self.anchor_row(context)? {
            Some(p) => self.normalizer.normalize(&shift(chunk, p, -1.0)),
            None => self.normalizer.normalize(chunk),
        })
    }

    /// Network units to action units.
    pub fn decode(&self, context: &[f64], z: &ActionChunk) -> Result<ActionChunk> {
        let raw = self.normalizer.denormalize(z);
        Ok(match self.anchor_row(context)? {
            Some(p) => shift(&raw, p, 1.0),
            None => raw,
        })
    }

    /// Generate a chunk in action units from an initialization in action units.
    pub fn sample(&self, context: &[f64], x_init: &ActionChunk, steps: usize, meter: &mut NfeMeter) -> Result<ActionChunk> {
        let start = self.encode(context, x_init)?;
        let end = euler_integrate(self, context, &start, steps, meter)?;
        self.decode(context, &end)
    }

    /// Generate from an initialization already in network units.
    pub fn sample_normalized(&self, context: &[f64], x_init: &ActionChunk, steps: usize, meter: &mut NfeMeter) -> Result<ActionChunk> {
        let end = euler_integrate(self, context, x_init, steps, meter)?;
        self.decode(context, &end)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = PolicyMeta {
            kind: "flow-policy".into(),
            net: self.net.clone(),
            normalizer: self.normalizer.clone(),
            anchor: self.anchor,
            suite_fingerprint: self.suite_fingerprint.clone(),
        };
        Ok(Checkpoint::new(serde_json::to_value(meta)?, self.store.clone()))
    }

    pub fn from_checkpoint(ck: Checkpoint, expected_suite: Option<&str>) -> Result<Self> {
        let meta: PolicyMeta =
            serde_json::from_value(ck.meta).map_err(|e| Error::corrupt("policy checkpoint", e.to_string()))?;
        if meta.kind != "flow-policy" {
            return Err(Error::corrupt("policy checkpoint", format!("kind is {}", meta.kind)));
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
            net: meta.net,
            store: ck.store,
            normalizer: meta.normalizer,
            anchor: meta.anchor,
            suite_fingerprint: meta.suite_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, expected_suite: Option<&str>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, expected_suite)
    }

    pub fn describe(&self) -> serde_json::Value {
        json!({"horizon": self.net.horizon, "action_dim": self.net.action_dim, "context_dim": self.net.context_dim})
    }
}

impl VelocityField for FlowPolicy {
    fn velocity(&self, t: f64, x: &ActionChunk, context: &[f64], meter: &mut NfeMeter) -> Result<ActionChunk> {
        meter.record();
        self.net.forward(&self.store, t, x, context)
    }
}
