//! Stage 2: contrastive training of the prior head.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{optimize, Stage2Config, TrainLog};
use crate::error::{Error, Result};
use crate::gpm::{mean_pool, PriorHead, TaskEmbedding};
use crate::nn::{backward, linalg::dot, GradientReport, Gradients, LossGraph, Mlp, MlpCache, ParamStore};
use crate::rng::{substream, Rng};
use crate::taskgen::{featurize, ContextVector, Dataset, DemoRole, Demonstration, FamilyRegistry};

/// Context at every step of a demonstration.
pub fn episode_contexts(registry: &FamilyRegistry, dataset: &Dataset, demo: &Demonstration) -> Result<Vec<ContextVector>> {
    let task = &dataset.task_of(demo).descriptor;
    demo.observations.iter().map(|o| featurize(registry, task, o)).collect()
}

/// Mean of the per-step contexts; the input from which bank keys are made.
pub fn pooled_context(registry: &FamilyRegistry, dataset: &Dataset, demo: &Demonstration) -> Result<ContextVector> {
    mean_pool(&episode_contexts(registry, dataset, demo)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairItem {
    pub demo: usize,
    pub task: usize,
}

/// Endless stream of batches made of same-task pairs. Tasks are visited in
/// a reshuffled cycle; each pair is two distinct demos of one task.
pub struct TaskPairBatches {
    groups: Vec<(usize, Vec<usize>)>,
    order: Vec<usize>,
    cursor: usize,
    pairs: usize,
    rng: Rng,
}

impl TaskPairBatches {
    /// `groups` are `(task, demo indices)`; tasks with fewer than two demos
    /// are dropped with a warning.
    pub fn from_groups(groups: Vec<(usize, Vec<usize>)>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::invalid(format!("task-pair batch size must be even and >= 2, got {batch_size}")));
        }
        let groups: Vec<_> = groups
            .into_iter()
            .filter(|(task, demos)| {
                if demos.len() < 2 {
                    log::warn!("task {task} has {} demonstration(s); excluded from contrastive batches", demos.len());
                }
                demos.len() >= 2
            })
            .collect();
        if groups.is_empty() {
            return Err(Error::invalid("no task has two demonstrations"));
        }
        Ok(Self {
            order: Vec::new(),
            cursor: 0,
            pairs: batch_size / 2,
            rng: substream(seed, "task-pairs"),
            groups,
        })
    }

    fn next_group(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.groups.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

impl Iterator for TaskPairBatches {
    type Item = Vec<PairItem>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut batch = Vec::with_capacity(2 * self.pairs);
        for _ in 0..self.pairs {
            let g = self.next_group();
            let (task, demos) = &self.groups[g];
            let i = self.rng.random_range(0..demos.len());
            let mut j = self.rng.random_range(0..demos.len() - 1);
            if j >= i {
                j += 1;
            }
            batch.push(PairItem { demo: demos[i], task: *task });
            batch.push(PairItem { demo: demos[j], task: *task });
        }
        Some(batch)
    }
}

/// Pair batches over the training demonstrations of `dataset`.
pub fn task_pair_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<TaskPairBatches> {
    let groups = dataset
        .tasks
        .iter()
        .enumerate()
        .map(|(t, rec)| (t, rec.demos.iter().copied().filter(|&d| dataset.demos[d].role == DemoRole::Train).collect()))
        .filter(|(_, d): &(usize, Vec<usize>)| !d.is_empty())
        .collect();
    TaskPairBatches::from_groups(groups, batch_size, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveItem {
    pub context: Vec<f64>,
    pub task: usize,
}

/// Supervised InfoNCE over unit-normalized head outputs: for each anchor,
/// `−log Σ_{P(i)} e^{s_ij/τ} + log Σ_{k≠i} e^{s_ik/τ}`, averaged over anchors
/// that have at least one positive.
pub struct InfoNceLoss<'a> {
    pub mlp: &'a Mlp,
    pub items: &'a [ContrastiveItem],
    pub temperature: f64,
}

pub struct InfoNceTape {
    caches: Vec<MlpCache>,
    z: Vec<Vec<f64>>,
    norms: Vec<f64>,
    /// `dL/dS` where `S_ij = ⟨z_i, z_j⟩ / τ`, for a unit output seed.
    dlogits: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl LossGraph for InfoNceLoss<'_> {
    type Tape = InfoNceTape;

    fn forward(&self, store: &ParamStore) -> Result<(Vec<f64>, Self::Tape)> {
        let n = self.items.len();
        if n < 2 {
            return Err(Error::invalid("InfoNCE needs at least two items"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("InfoNCE temperature must be positive"));
        }
        let mut caches = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for item in self.items {
            let (y, cache) = self.mlp.forward_cached(store, &item.context)?;
            let nrm = crate::nn::linalg::norm(&y);
            if !(nrm > 0.0 && nrm.is_finite()) {
                return Err(Error::DegenerateEmbedding);
            }
            z.push(y.iter().map(|v| v / nrm).collect::<Vec<_>>());
            norms.push(nrm);
            caches.push(cache);
        }
        let logits: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| dot(&z[i], &z[j]) / self.temperature).collect())
            .collect();

        let anchors: Vec<usize> = (0..n)
            .filter(|&i| (0..n).any(|j| j != i && self.items[j].task == self.items[i].task))
            .collect();
        if anchors.is_empty() {
            return Err(Error::invalid("no anchor in the batch has a positive"));
        }
        let m = anchors.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![vec![0.0; n]; n];
        for &i in &anchors {
            let others = (0..n).filter(move |&k| k != i);
            let pos = others.clone().filter(|&j| self.items[j].task == self.items[i].task);
            let lse_all = log_sum_exp(others.clone().map(|k| logits[i][k]));
            let lse_pos = log_sum_exp(pos.clone().map(|j| logits[i][j]));
            loss += lse_all - lse_pos;
            for k in others {
                dlogits[i][k] += (logits[i][k] - lse_all).exp() / m;
            }
            for j in pos {
                dlogits[i][j] -= (logits[i][j] - lse_pos).exp() / m;
            }
        }
        Ok((
            vec![loss / m],
            InfoNceTape {
                caches,
                z,
                norms,
                dlogits,
            },
        ))
    }

    fn backward(&self, store: &ParamStore, tape: Self::Tape, seed: &[f64], grads: &mut Gradients) -> Result<()> {
        let n = tape.z.len();
        let d = tape.z[0].len();
        let mut dz = vec![vec![0.0; d]; n];
        for i in 0..n {
            for j in 0..n {
                let g = seed[0] * tape.dlogits[i][j] / self.temperature;
                if g == 0.0 {
                    continue;
                }
                for c in 0..d {
                    dz[i][c] += g * tape.z[j][c];
                    dz[j][c] += g * tape.z[i][c];
                }
            }
        }
        for ((cache, (z, g)), nrm) in tape.caches.iter().zip(tape.z.iter().zip(&dz)).zip(&tape.norms) {
            let proj = dot(z, g);
            let dy: Vec<f64> = z.iter().zip(g).map(|(zc, gc)| (gc - zc * proj) / nrm).collect();
            self.mlp.backward(store, cache, &dy, grads);
        }
        Ok(())
    }
}

/// Loss and gradient of the head on one batch.
pub fn infonce_loss(head: &PriorHead, batch: &[ContrastiveItem], temperature: f64) -> Result<GradientReport> {
    backward(
        &InfoNceLoss {
            mlp: &head.mlp,
            items: batch,
            temperature,
        },
        &head.store,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginReport {
    pub intra: f64,
    pub inter: f64,
    pub margin: f64,
    pub demos: usize,
}

/// Mean same-task minus mean cross-task cosine of pooled-context keys over
/// the demonstrations with `role`.
pub fn embedding_margin(head: &PriorHead, dataset: &Dataset, registry: &FamilyRegistry, role: DemoRole) -> Result<MarginReport> {
    let mut keys: Vec<(usize, TaskEmbedding)> = Vec::new();
    for (_, demo) in dataset.demos_with_role(role) {
        keys.push((demo.task, head.embed(&pooled_context(registry, dataset, demo)?)?));
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let s = keys[i].1.dot(&keys[j].1);
            if keys[i].0 == keys[j].0 {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::invalid("margin needs same-task and cross-task pairs"));
    }
    let (intra, inter) = (intra / n_intra as f64, inter / n_inter as f64);
    Ok(MarginReport {
        intra,
        inter,
        margin: intra - inter,
        demos: keys.len(),
    })
}

pub struct Stage2Output {
    pub head: PriorHead,
    pub log: TrainLog,
    pub margin: MarginReport,
}

/// Train the prior head alone. Each item sees either the pooled episode
/// context or a single step's context, so that keys (pooled) and queries
/// (episode start) land near each other.
pub fn stage2_train(dataset: &Dataset, registry: &FamilyRegistry, config: &Stage2Config, seed: u64) -> Result<Stage2Output> {
    config.optim.validate("stage2")?;
    let mut head = PriorHead::new(
        crate::taskgen::context_dim(registry),
        config.hidden,
        config.embed_dim,
        &dataset.suite_fingerprint,
        &mut substream(seed, "stage2/init"),
    )?;
    let mut batches = task_pair_batches(dataset, config.optim.batch_size, seed)?;
    let mut view_rng = substream(seed, "stage2/views");
    let pooled: Vec<Option<ContextVector>> = dataset
        .demos
        .iter()
        .map(|d| (d.role == DemoRole::Train).then(|| pooled_context(registry, dataset, d)).transpose())
        .collect::<Result<_>>()?;

    let mlp = head.mlp.clone();
    let mut log = TrainLog::new(2, seed, config.optim.smoothing);
    optimize(&mut head.store, &config.optim, &mut log, |_, store| {
        let batch = batches.next().expect("endless iterator");
        let items = batch
            .iter()
            .map(|p| {
                let demo = &dataset.demos[p.demo];
                let context = if view_rng.random_bool(0.5) {
                    pooled[p.demo].clone().expect("train demo")
                } else {
                    let row = view_rng.random_range(0..demo.observations.len());
                    featurize(registry, &dataset.task_of(demo).descriptor, &demo.observations[row])?
                };
                Ok(ContrastiveItem { context, task: p.task })
            })
            .collect::<Result<Vec<_>>>()?;
        backward(
            &InfoNceLoss {
                mlp: &mlp,
                items: &items,
                temperature: config.temperature,
            },
            store,
        )
    })?;
    let margin = embedding_margin(&head, dataset, registry, DemoRole::Validation)?;
    log::info!(
        "prior head: intra {:.3} inter {:.3} margin {:.3} over {} held-out demos",
        margin.intra,
        margin.inter,
        margin.margin,
        margin.demos
    );
    Ok(Stage2Output { head, log, margin })
}
