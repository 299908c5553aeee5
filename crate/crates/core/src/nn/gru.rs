use serde::{Deserialize, Serialize};

use super::linalg::{affine, affine_backward, sigmoid};
use super::params::{Gradients, ParamStore};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

/// Gated recurrent cell:
///
/// ```text
/// z  = σ(Wz x + Uz h + bz)
/// r  = σ(Wr x + Ur h + br)
/// n  = tanh(Wn x + bn + r ⊙ (Un h))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// The output of a step is the new state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    prefix: String,
    d_in: usize,
    d_state: usize,
}

pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    uh: Vec<f64>,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl GruCell {
    pub fn new(prefix: &str, d_in: usize, d_state: usize) -> Result<Self> {
        if d_in == 0 || d_state == 0 {
            return Err(Error::invalid("recurrent cell widths must be positive"));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            d_in,
            d_state,
        })
    }

    pub fn d_state(&self) -> usize {
        self.d_state
    }

    fn name(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}{gate}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for g in GATES {
            store.insert_uniform(&self.name("w", g), &[self.d_state, self.d_in], self.d_in, rng)?;
            store.insert_uniform(&self.name("u", g), &[self.d_state, self.d_state], self.d_state, rng)?;
            store.insert_zeros(&self.name("b", g), &[self.d_state])?;
        }
        Ok(())
    }

    pub fn reset_state(&self) -> Vec<f64> {
        vec![0.0; self.d_state]
    }

    /// One recurrent update; returns `(new_state, output)`.
    pub fn step(&self, store: &ParamStore, state: &[f64], input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (h, _) = self.step_cached(store, state, input)?;
        Ok((h.clone(), h))
    }

    pub fn step_cached(&self, store: &ParamStore, state: &[f64], input: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        check_dim("recurrent state", self.d_state, state.len())?;
        check_dim("recurrent input", self.d_in, input.len())?;
        let d = self.d_state;
        let gate_pre = |g: &str| -> Vec<f64> {
            let wx = affine(store.get(&self.name("w", g)), store.get(&self.name("b", g)), input, d);
            let uh = affine(store.get(&self.name("u", g)), &[], state, d);
            wx.iter().zip(&uh).map(|(a, b)| a + b).collect()
        };
        let z: Vec<f64> = gate_pre("z").into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate_pre("r").into_iter().map(sigmoid).collect();
        let wx = affine(store.get(&self.name("w", "n")), store.get(&self.name("b", "n")), input, d);
        let uh = affine(store.get(&self.name("u", "n")), &[], state, d);
        let n: Vec<f64> = (0..d).map(|i| (wx[i] + r[i] * uh[i]).tanh()).collect();
        let h_new = (0..d).map(|i| (1.0 - z[i]) * n[i] + z[i] * state[i]).collect();
        Ok((
            h_new,
            GruCache {
                x: input.to_vec(),
                h: state.to_vec(),
                z,
                r,
                n,
                uh,
            },
        ))
    }

    /// Given `dh_new`, accumulate parameter gradients and return `(d_state, d_input)`.
    pub fn backward(&self, store: &ParamStore, cache: &GruCache, dh_new: &[f64], grads: &mut Gradients) -> (Vec<f64>, Vec<f64>) {
        let d = self.d_state;
        let mut dh = vec![0.0; d];
        let mut dx = vec![0.0; self.d_in];
        let mut dan = vec![0.0; d];
        let mut daz = vec![0.0; d];
        let mut dar = vec![0.0; d];
        let mut duh = vec![0.0; d];
        for i in 0..d {
            let g = dh_new[i];
            let (z, r, n) = (cache.z[i], cache.r[i], cache.n[i]);
            dh[i] += g * z;
            let dn = g * (1.0 - z);
            let dz = g * (cache.h[i] - n);
            dan[i] = dn * (1.0 - n * n);
            duh[i] = dan[i] * r;
            let dr = dan[i] * cache.uh[i];
            daz[i] = dz * z * (1.0 - z);
            dar[i] = dr * r * (1.0 - r);
        }
        for (gate, pre, u_in) in [("z", &daz, &daz), ("r", &dar, &dar), ("n", &dan, &duh)] {
            let (wn, bn, un) = (self.name("w", gate), self.name("b", gate), self.name("u", gate));
            {
                let (dw, db) = grads.slot_pair(&wn, &bn);
                affine_backward(store.get(&wn), &cache.x, pre, dw, Some(db), Some(&mut dx));
            }
            affine_backward(store.get(&un), &cache.h, u_in, grads.slot(&un), None, Some(&mut dh));
        }
        (dh, dx)
    }
}
