use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// Apply one update. A non-finite gradient rejects the whole step and
    /// leaves the store untouched.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if !(lr.is_finite() && weight_decay.is_finite()) {
            return Err(Error::invalid("learning rate and weight decay must be finite"));
        }
        store.bump_step();
        let t = store.step() as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.params_mut() {
            let g = grads.get(&p.name);
            for i in 0..p.value.len() {
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g[i];
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                p.value[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * p.value[i]);
            }
        }
        Ok(())
    }
}
