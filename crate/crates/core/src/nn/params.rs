use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A named parameter array with its optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Flat named parameter storage owned by one trainable component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Each name may be owned by exactly one block.
    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::invalid(format!(
                "parameter {name}: shape {shape:?} holds {numel} values, got {}",
                value.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} already registered")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            value,
        });
        Ok(())
    }

    /// Register a parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let value = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, value)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, shape, vec![0.0; shape.iter().product()])
    }

    pub(crate) fn restore(params: Vec<Param>, step: u64) -> Result<Self> {
        let mut store = ParamStore {
            params: Vec::with_capacity(params.len()),
            index: BTreeMap::new(),
            step,
        };
        for p in params {
            if store.index.contains_key(&p.name) {
                return Err(Error::invalid(format!("duplicate parameter {}", p.name)));
            }
            let numel: usize = p.shape.iter().product();
            if p.value.len() != numel || p.m.len() != numel || p.v.len() != numel {
                return Err(Error::invalid(format!("parameter {} has inconsistent lengths", p.name)));
            }
            store.index.insert(p.name.clone(), store.params.len());
            store.params.push(p);
        }
        Ok(store)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param(&self, name: &str) -> &Param {
        match self.index.get(name) {
            Some(&i) => &self.params[i],
            None => panic!("parameter {name} is not registered in this store"),
        }
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        match self.index.get(name) {
            Some(&i) => &mut self.params[i],
            None => panic!("parameter {name} is not registered in this store"),
        }
    }

    /// Values of a registered parameter.
    pub fn get(&self, name: &str) -> &[f64] {
        &self.param(name).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self.param_mut(name).value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            arrays: self
                .params
                .iter()
                .map(|p| (p.name.clone(), vec![0.0; p.numel()]))
                .collect(),
        }
    }
}

/// Gradient arrays keyed by parameter name, shaped like their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    arrays: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> &[f64] {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("no gradient slot for {name}"))
    }

    pub fn slot(&mut self, name: &str) -> &mut [f64] {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient slot for {name}"))
    }

    /// Two distinct slots at once, for blocks that update weights and biases together.
    pub fn slot_pair(&mut self, a: &str, b: &str) -> (&mut [f64], &mut [f64]) {
        assert_ne!(a, b);
        let mut first = None;
        let mut second = None;
        for (k, v) in self.arrays.iter_mut() {
            if k == a {
                first = Some(v.as_mut_slice());
            } else if k == b {
                second = Some(v.as_mut_slice());
            }
        }
        (
            first.unwrap_or_else(|| panic!("no gradient slot for {a}")),
            second.unwrap_or_else(|| panic!("no gradient slot for {b}")),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.arrays.values_mut() {
            for g in v.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (k, v) in self.arrays.iter_mut() {
            let o = other.get(k);
            for (a, b) in v.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(|v| v.iter().all(|g| g.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays.values().flatten().copied().collect()
    }
}

/// Scalar loss value together with the gradient of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    pub grads: Gradients,
}

/// A recorded computation ending in a loss.
///
/// `forward` evaluates the graph and keeps whatever intermediate values
/// `backward` needs; `backward` propagates the output adjoint `seed` back to
/// the parameters, accumulating into `grads`.
pub trait LossGraph {
    type Tape;

    fn forward(&self, store: &ParamStore) -> Result<(Vec<f64>, Self::Tape)>;

    fn backward(&self, store: &ParamStore, tape: Self::Tape, seed: &[f64], grads: &mut Gradients) -> Result<()>;
}

/// Reverse-mode pass over a scalar loss graph.
pub fn backward<G: LossGraph>(graph: &G, store: &ParamStore) -> Result<GradientReport> {
    let (out, tape) = graph.forward(store)?;
    if out.len() != 1 {
        return Err(Error::invalid(format!(
            "backward needs a scalar loss, graph produced {} values",
            out.len()
        )));
    }
    let loss = out[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grads = store.zero_grads();
    graph.backward(store, tape, &[1.0], &mut grads)?;
    Ok(GradientReport { loss, grads })
}

/// Forward-only evaluation of a scalar loss graph.
pub fn evaluate<G: LossGraph>(graph: &G, store: &ParamStore) -> Result<f64> {
    let (out, _) = graph.forward(store)?;
    if out.len() != 1 {
        return Err(Error::invalid("evaluate needs a scalar loss"));
    }
    Ok(out[0])
}
