use serde::{Deserialize, Serialize};

use super::linalg::{affine, affine_backward};
use super::params::{Gradients, ParamStore};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Mlp,
    Attention,
    RecurrentCell,
}

/// Shape description of one dense block.
///
/// `widths` is `[in, hidden.., out]` for an MLP, `[d_in, d_model]` for
/// attention and `[d_in, d_state]` for the recurrent cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub kind: BlockKind,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl DenseBlockSpec {
    pub fn mlp(widths: &[usize]) -> Self {
        Self {
            kind: BlockKind::Mlp,
            widths: widths.to_vec(),
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("block needs at least input and output widths"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("block widths must be positive"));
        }
        match self.kind {
            BlockKind::Mlp => Ok(()),
            BlockKind::Attention | BlockKind::RecurrentCell if self.widths.len() == 2 => Ok(()),
            _ => Err(Error::invalid("attention and recurrent blocks take exactly two widths")),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Fully connected network. Hidden layers use the block's activation; the
/// output layer is affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    prefix: String,
    spec: DenseBlockSpec,
}

pub struct MlpCache {
    /// Input to each layer; `activations[0]` is the block input.
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(prefix: &str, spec: DenseBlockSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind != BlockKind::Mlp {
            return Err(Error::invalid("Mlp needs an mlp block spec"));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            spec,
        })
    }

    pub fn spec(&self) -> &DenseBlockSpec {
        &self.spec
    }

    pub fn layers(&self) -> usize {
        self.spec.widths.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Register seeded parameters in `store`. Biases start at zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for l in 0..self.layers() {
            let (i, o) = (self.spec.widths[l], self.spec.widths[l + 1]);
            store.insert_uniform(&self.weight_name(l), &[o, i], i, rng)?;
            store.insert_zeros(&self.bias_name(l), &[o])?;
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(store, input)?.0)
    }

    pub fn forward_cached(&self, store: &ParamStore, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_dim("mlp input", self.spec.input_dim(), input.len())?;
        let mut activations = Vec::with_capacity(self.layers());
        let mut x = input.to_vec();
        for l in 0..self.layers() {
            let out_dim = self.spec.widths[l + 1];
            let mut y = affine(store.get(&self.weight_name(l)), store.get(&self.bias_name(l)), &x, out_dim);
            if l + 1 < self.layers() {
                for v in y.iter_mut() {
                    *v = self.spec.activation.apply(*v);
                }
            }
            activations.push(std::mem::replace(&mut x, y));
        }
        Ok((x, MlpCache { activations }))
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&self, store: &ParamStore, cache: &MlpCache, dout: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let mut dy = dout.to_vec();
        for l in (0..self.layers()).rev() {
            let x = &cache.activations[l];
            let w = store.get(&self.weight_name(l));
            let mut dx = vec![0.0; x.len()];
            let (dw, db) = grads.slot_pair(&self.weight_name(l), &self.bias_name(l));
            affine_backward(w, x, &dy, dw, Some(db), Some(&mut dx));
            if l > 0 {
                // x is the activated output of layer l-1
                for (d, xi) in dx.iter_mut().zip(x) {
                    *d *= self.spec.activation.derivative_from_output(*xi);
                }
            }
            dy = dx;
        }
        dy
    }
}
