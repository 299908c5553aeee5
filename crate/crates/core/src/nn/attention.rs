use serde::{Deserialize, Serialize};

use super::linalg::{affine, affine_backward, dot, softmax};
use super::params::{Gradients, ParamStore};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

/// Single-head scaled dot-product self-attention without output projection.
///
/// Each output row is `Σ_j softmax_j(q_i·k_j / √d) · v_j`, so it lies in the
/// convex hull of the value-projected tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    prefix: String,
    d_in: usize,
    d_model: usize,
}

pub struct AttentionCache {
    x: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

impl SelfAttention {
    pub fn new(prefix: &str, d_in: usize, d_model: usize) -> Result<Self> {
        if d_in == 0 || d_model == 0 {
            return Err(Error::invalid("attention widths must be positive"));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            d_in,
            d_model,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn query_name(&self) -> String {
        format!("{}.wq", self.prefix)
    }

    pub fn key_name(&self) -> String {
        format!("{}.wk", self.prefix)
    }

    pub fn value_name(&self) -> String {
        format!("{}.wv", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let shape = [self.d_model, self.d_in];
        store.insert_uniform(&self.query_name(), &shape, self.d_in, rng)?;
        store.insert_uniform(&self.key_name(), &shape, self.d_in, rng)?;
        store.insert_uniform(&self.value_name(), &shape, self.d_in, rng)?;
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, tokens: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_cached(store, tokens)?.0)
    }

    pub fn forward_cached(&self, store: &ParamStore, tokens: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, AttentionCache)> {
        if tokens.is_empty() {
            return Err(Error::invalid("attention over an empty token sequence"));
        }
        for t in tokens {
            check_dim("attention token", self.d_in, t.len())?;
        }
        let project = |name: String| -> Vec<Vec<f64>> {
            let w = store.get(&name);
            tokens.iter().map(|t| affine(w, &[], t, self.d_model)).collect()
        };
        let q = project(self.query_name());
        let k = project(self.key_name());
        let v = project(self.value_name());
        let scale = 1.0 / (self.d_model as f64).sqrt();

        let weights: Vec<Vec<f64>> = q
            .iter()
            .map(|qi| {
                let scores: Vec<f64> = k.iter().map(|kj| dot(qi, kj) * scale).collect();
                softmax(&scores)
            })
            .collect();
        let out = weights
            .iter()
            .map(|row| {
                let mut o = vec![0.0; self.d_model];
                for (a, vj) in row.iter().zip(&v) {
                    for (oi, vi) in o.iter_mut().zip(vj) {
                        *oi += a * vi;
                    }
                }
                o
            })
            .collect();
        Ok((
            out,
            AttentionCache {
                x: tokens.to_vec(),
                q,
                k,
                v,
                weights,
            },
        ))
    }

    /// Accumulate projection gradients and return per-token input gradients.
    pub fn backward(&self, store: &ParamStore, cache: &AttentionCache, dout: &[Vec<f64>], grads: &mut Gradients) -> Vec<Vec<f64>> {
        let n = cache.x.len();
        let d = self.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];

        for i in 0..n {
            let a = &cache.weights[i];
            let da: Vec<f64> = cache.v.iter().map(|vj| dot(&dout[i], vj)).collect();
            let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            for j in 0..n {
                for (dvj, g) in dv[j].iter_mut().zip(&dout[i]) {
                    *dvj += a[j] * g;
                }
                let ds = a[j] * (da[j] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..d {
                    dq[i][c] += ds * cache.k[j][c];
                    dk[j][c] += ds * cache.q[i][c];
                }
            }
        }

        let mut dx = vec![vec![0.0; self.d_in]; n];
        for (name, dproj) in [(self.query_name(), &dq), (self.key_name(), &dk), (self.value_name(), &dv)] {
            let w = store.get(&name);
            let dw = grads.slot(&name);
            for i in 0..n {
                affine_backward(w, &cache.x[i], &dproj[i], dw, None, Some(&mut dx[i]));
            }
        }
        dx
    }
}
