use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{linalg::norm, Checkpoint, DenseBlockSpec, Mlp, ParamStore};
use crate::rng::Rng;

const UNIT_TOLERANCE: f64 = 1e-9;

/// A unit-norm task embedding used as a memory key or query.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding(Vec<f64>);

impl TaskEmbedding {
    /// Wrap a vector that is already unit norm.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!("task embedding has norm {n}, expected 1")));
        }
        Ok(Self(v))
    }

    /// `v / ‖v‖₂`.
    pub fn normalize(v: &[f64]) -> Result<Self> {
        let n = norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Self(v.iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &TaskEmbedding) -> f64 {
        crate::nn::linalg::dot(&self.0, &other.0)
    }
}

/// Arithmetic mean over a non-empty sequence of equal-length vectors.
pub fn mean_pool(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = tokens.first().ok_or_else(|| Error::invalid("mean pooling over no tokens"))?;
    let mut out = vec![0.0; first.len()];
    for t in tokens {
        check_dim("mean_pool token", first.len(), t.len())?;
        for (o, v) in out.iter_mut().zip(t) {
            *o += v;
        }
    }
    let n = tokens.len() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// Two-layer projection from a context vector to a task embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorHead {
    pub(crate) mlp: Mlp,
    pub store: ParamStore,
    pub suite_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    kind: String,
    mlp: Mlp,
    suite_fingerprint: String,
}

impl PriorHead {
    pub fn new(context_dim: usize, hidden: usize, embed_dim: usize, suite_fingerprint: &str, rng: &mut Rng) -> Result<Self> {
        let mlp = Mlp::new("prior_head", DenseBlockSpec::mlp(&[context_dim, hidden, embed_dim]))?;
        let mut store = ParamStore::new();
        mlp.init(&mut store, rng)?;
        Ok(Self {
            mlp,
            store,
            suite_fingerprint: suite_fingerprint.to_string(),
        })
    }

    pub fn from_parts(mlp: Mlp, store: ParamStore, suite_fingerprint: &str) -> Self {
        Self {
            mlp,
            store,
            suite_fingerprint: suite_fingerprint.to_string(),
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn context_dim(&self) -> usize {
        self.mlp.spec().input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.spec().output_dim()
    }

    /// Un-normalized projection.
    pub fn project(&self, context: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(&self.store, context)
    }

    pub fn embed(&self, context: &[f64]) -> Result<TaskEmbedding> {
        embed_context(self, context)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = HeadMeta {
            kind: "prior-head".into(),
            mlp: self.mlp.clone(),
            suite_fingerprint: self.suite_fingerprint.clone(),
        };
        Ok(Checkpoint::new(serde_json::to_value(meta)?, self.store.clone()))
    }

    pub fn from_checkpoint(ck: Checkpoint, expected_suite: Option<&str>) -> Result<Self> {
        let meta: HeadMeta =
            serde_json::from_value(ck.meta).map_err(|e| Error::corrupt("prior-head checkpoint", e.to_string()))?;
        if meta.kind != "prior-head" {
            return Err(Error::corrupt("prior-head checkpoint", format!("kind is {}", meta.kind)));
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
            mlp: meta.mlp,
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

/// Project a context through the head and L2-normalize it.
pub fn embed_context(head: &PriorHead, context: &[f64]) -> Result<TaskEmbedding> {
    TaskEmbedding::normalize(&head.project(context)?)
}
