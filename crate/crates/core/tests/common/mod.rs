//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use dualmem::flow::{ActionChunk, CfmItem, CfmLoss, VelocityNet};
use dualmem::gpm::PriorHead;
use dualmem::lcm::{LcmConfig, LcmLoss, LcmRollout, LocalConsistency};
use dualmem::nn::gradcheck::{finite_difference, relative_error};
use dualmem::nn::{backward, AttentionCache, GruCache, GruCell, LossGraph, Gradients, Mlp, MlpCache, ParamStore, SelfAttention, DenseBlockSpec};
use dualmem::rng::{standard_normal, substream, Rng};
use dualmem::train::{ContrastiveItem, InfoNceLoss, PipelineConfig};
use dualmem::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

pub fn chunk(rng: &mut Rng, h: usize, a: usize) -> ActionChunk {
    ActionChunk::new(h, a, normals(rng, h * a)).unwrap()
}

/// `Σ w·mlp(x)`.
pub struct MlpProbe {
    pub mlp: Mlp,
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LossGraph for MlpProbe {
    type Tape = MlpCache;

    fn forward(&self, store: &ParamStore) -> Result<(Vec<f64>, MlpCache)> {
        let (out, cache) = self.mlp.forward_cached(store, &self.input)?;
        Ok((vec![dot(&out, &self.weights)], cache))
    }

    fn backward(&self, store: &ParamStore, tape: MlpCache, seed: &[f64], grads: &mut Gradients) -> Result<()> {
        let dout: Vec<f64> = self.weights.iter().map(|w| w * seed[0]).collect();
        self.mlp.backward(store, &tape, &dout, grads);
        Ok(())
    }
}

/// `Σ_i w_i·attention(tokens)_i`.
pub struct AttentionProbe {
    pub attention: SelfAttention,
    pub tokens: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl LossGraph for AttentionProbe {
    type Tape = AttentionCache;

    fn forward(&self, store: &ParamStore) -> Result<(Vec<f64>, AttentionCache)> {
        let (out, cache) = self.attention.forward_cached(store, &self.tokens)?;
        Ok((vec![out.iter().zip(&self.weights).map(|(o, w)| dot(o, w)).sum()], cache))
    }

    fn backward(&self, store: &ParamStore, tape: AttentionCache, seed: &[f64], grads: &mut Gradients) -> Result<()> {
        let dout: Vec<Vec<f64>> = self.weights.iter().map(|w| w.iter().map(|x| x * seed[0]).collect()).collect();
        self.attention.backward(store, &tape, &dout, grads);
        Ok(())
    }
}

/// `w·h_T` after unrolling the cell over `inputs` from the zero state.
pub struct GruProbe {
    pub cell: GruCell,
    pub inputs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl LossGraph for GruProbe {
    type Tape = Vec<GruCache>;

    fn forward(&self, store: &ParamStore) -> Result<(Vec<f64>, Vec<GruCache>)> {
        let mut h = self.cell.reset_state();
        let mut caches = Vec::new();
        for x in &self.inputs {
            let (next, cache) = self.cell.step_cached(store, &h, x)?;
            caches.push(cache);
            h = next;
        }
        Ok((vec![dot(&h, &self.weights)], caches))
    }

    fn backward(&self, store: &ParamStore, tape: Vec<GruCache>, seed: &[f64], grads: &mut Gradients) -> Result<()> {
        let mut dh: Vec<f64> = self.weights.iter().map(|w| w * seed[0]).collect();
        for cache in tape.iter().rev() {
            dh = self.cell.backward(store, cache, &dh, grads).0;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gradient_error<G: LossGraph>(graph: &G, store: &ParamStore) -> f64 {
    let analytic = backward(graph, store).unwrap().grads;
    let numeric = finite_difference(graph, store, FD_STEP).unwrap();
    relative_error(&analytic, &numeric)
}

/// Relative analytic-vs-central-difference gradient error of every trainable
/// module and loss on random small instances drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = substream(seed, "gradient-suite");
    let mut out = Vec::new();

    let mlp = Mlp::new("m", DenseBlockSpec::mlp(&[5, 7, 6, 3])).unwrap();
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut rng).unwrap();
    let probe = MlpProbe {
        mlp,
        input: normals(&mut rng, 5),
        weights: normals(&mut rng, 3),
    };
    out.push(("mlp", gradient_error(&probe, &store)));

    let attention = SelfAttention::new("a", 4, 5).unwrap();
    let mut store = ParamStore::new();
    attention.init(&mut store, &mut rng).unwrap();
    let probe = AttentionProbe {
        attention,
        tokens: (0..3).map(|_| normals(&mut rng, 4)).collect(),
        weights: (0..3).map(|_| normals(&mut rng, 5)).collect(),
    };
    out.push(("attention", gradient_error(&probe, &store)));

    let cell = GruCell::new("g", 3, 4).unwrap();
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut rng).unwrap();
    let probe = GruProbe {
        cell,
        inputs: (0..3).map(|_| normals(&mut rng, 3)).collect(),
        weights: normals(&mut rng, 4),
    };
    out.push(("gru", gradient_error(&probe, &store)));

    let net = VelocityNet::new(3, 2, 4, &[6]).unwrap();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng).unwrap();
    let batch: Vec<CfmItem> = (0..3)
        .map(|i| CfmItem {
            context: normals(&mut rng, 4),
            x0: chunk(&mut rng, 3, 2),
            x1: chunk(&mut rng, 3, 2),
            t: 0.1 + 0.3 * i as f64,
        })
        .collect();
    out.push(("cfm", gradient_error(&CfmLoss { net: &net, batch: &batch }, &store)));

    let head = PriorHead::new(5, 6, 3, "suite", &mut rng).unwrap();
    let items: Vec<ContrastiveItem> = (0..5)
        .map(|i| ContrastiveItem {
            context: normals(&mut rng, 5),
            task: i % 2,
        })
        .collect();
    let loss = InfoNceLoss {
        mlp: head.mlp(),
        items: &items,
        temperature: 0.5,
    };
    out.push(("infonce", gradient_error(&loss, &head.store)));

    let config = LcmConfig {
        feature_dim: 4,
        state_dim: 3,
        p_cold: 0.0,
    };
    let model = LocalConsistency::new(3, 2, config, "suite", &mut rng).unwrap();
    let rollouts: Vec<LcmRollout> = (0..2)
        .map(|_| LcmRollout {
            prev_chunks: (0..3).map(|_| chunk(&mut rng, 3, 2)).collect(),
            targets: (0..3).map(|_| chunk(&mut rng, 3, 2)).collect(),
        })
        .collect();
    let masks = vec![vec![false, true, false], vec![true, false, false]];
    let loss = LcmLoss {
        model: &model,
        rollouts: &rollouts,
        masks: Some(&masks),
    };
    out.push(("lcm", gradient_error(&loss, &model.store)));
    out
}

/// Small, fast configuration for integration tests that need a trained stack.
pub fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.tasks_per_family = 2;
    cfg.data.demos_per_task = 6;
    cfg.data.validation_demos_per_task = 2;
    cfg.stage1.optim.steps = 200;
    cfg.stage1.hidden = vec![32];
    cfg.stage2.optim.steps = 100;
    cfg.stage3.optim.steps = 30;
    cfg.stage3.optim.batch_size = 8;
    cfg.lcm.feature_dim = 8;
    cfg.lcm.state_dim = 8;
    cfg
}

use dualmem::gpm::{
    compose_prior, extract_aligned_chunk, nfe_schedule, nfe_schedule_unrounded, noise_schedule, resample_chunk, sample_prior_init,
    weights_and_similarity, EpisodeSession, GpmConfig, MemoryBank, MemoryEntry, SamplerSchedule, TaskEmbedding, TaskPrior,
};

pub fn unit(rng: &mut Rng, dim: usize) -> TaskEmbedding {
    TaskEmbedding::normalize(&normals(rng, dim)).unwrap()
}

/// Bank of `size` random entries; trajectory lengths vary in `[window, window + 12]`.
pub fn random_bank(rng: &mut Rng, size: usize, dim: usize, window: usize, stride: usize) -> MemoryBank {
    use rand::Rng as _;
    let mut bank = MemoryBank::new(dim, 2, window, stride).unwrap();
    for i in 0..size {
        let len = window + rng.random_range(0..=12);
        bank.insert(MemoryEntry {
            key: unit(rng, dim),
            trajectory: chunk(rng, len, 2),
            window,
            stride,
            task_id: format!("t{i}"),
        })
        .unwrap();
    }
    bank
}

/// Top-k against a full scan with a stable sort on (score desc, index asc).
pub fn topk_matches_scan(seed: u64, size: usize, k: usize) -> bool {
    let mut rng = substream(seed, "topk-oracle");
    let dim = 6;
    let bank = random_bank(&mut rng, size, dim, 1, 1);
    (0..5).all(|_| {
        let query = unit(&mut rng, dim);
        let mut scan: Vec<(usize, f64)> = bank
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.key.as_slice().iter().zip(query.as_slice()).map(|(a, b)| a * b).sum()))
            .collect();
        scan.sort_by(|a, b| b.1.total_cmp(&a.1));
        let got = bank.retrieve_topk(&query, k).unwrap();
        got.len() == k && got.iter().zip(&scan).all(|(n, (i, s))| n.index == *i && n.score == *s)
    })
}

/// Largest absolute deviation of `compose_prior` from separate mean and
/// variance passes, over random `k ≤ 4` compositions.
pub fn compose_prior_deviation(seed: u64, trials: usize) -> f64 {
    use rand::Rng as _;
    let mut rng = substream(seed, "compose-oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = rng.random_range(1..=4);
        let (h, a) = (rng.random_range(1..6), rng.random_range(1..4));
        let chunks: Vec<ActionChunk> = (0..k).map(|_| chunk(&mut rng, h, a)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let floor = 1e-4;
        let prior = compose_prior(&chunks, &w, 0.5, floor).unwrap();
        for r in 0..h {
            for c in 0..a {
                let mean: f64 = (0..k).map(|i| w[i] * chunks[i].get(r, c)).sum();
                let var: f64 = (0..k).map(|i| w[i] * (chunks[i].get(r, c) - mean).powi(2)).sum();
                worst = worst.max((prior.mean.get(r, c) - mean).abs());
                worst = worst.max((prior.var.get(r, c) - var.max(floor)).abs());
            }
        }
    }
    worst
}

/// Every session step equals retrieval, weighting, slicing, resampling and
/// composition redone from scratch, bit for bit.
pub fn session_matches_recomputation(seed: u64) -> bool {
    let mut rng = substream(seed, "session-oracle");
    let (dim, window, stride, horizon) = (5, 4, 2, 6);
    let bank = random_bank(&mut rng, 40, dim, window, stride);
    let config = GpmConfig::default();
    let query = unit(&mut rng, dim);
    let reference_len = 17.0;
    let mut session = EpisodeSession::from_query(&bank, query.clone(), config, reference_len, |_| true).unwrap();
    let mut progress: f64 = 0.0;
    for _ in 0..8 {
        let (prior, schedule) = session.step(horizon).unwrap();
        let neighbors = bank.retrieve_topk(&query, config.k).unwrap();
        let scores: Vec<f64> = neighbors.iter().map(|n| n.score).collect();
        let (weights, similarity) = weights_and_similarity(&scores, config.temperature).unwrap();
        let chunks: Vec<ActionChunk> = neighbors
            .iter()
            .map(|n| resample_chunk(&extract_aligned_chunk(bank.entry(n.index), progress).unwrap(), horizon).unwrap())
            .collect();
        let expected: TaskPrior = compose_prior(&chunks, &weights, similarity, config.var_floor).unwrap();
        let expected_schedule: SamplerSchedule = config.bounds.schedule(similarity).unwrap();
        if prior != expected || schedule != expected_schedule {
            return false;
        }
        progress = (progress + horizon as f64 / reference_len).min(1.0);
    }
    true
}

/// Largest deviation of `resample_chunk` from direct linear interpolation
/// between the bracketing rows.
pub fn resample_deviation(seed: u64, trials: usize) -> f64 {
    use rand::Rng as _;
    let mut rng = substream(seed, "resample-oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let h0 = rng.random_range(2..12);
        let h = rng.random_range(2..20);
        let block = chunk(&mut rng, h0, 2);
        let out = resample_chunk(&block, h).unwrap();
        for j in 0..h {
            let s = j as f64 / (h - 1) as f64 * (h0 - 1) as f64;
            let i = (s.floor() as usize).min(h0 - 2);
            let f = s - i as f64;
            for c in 0..2 {
                let expect = (1.0 - f) * block.get(i, c) + f * block.get(i + 1, c);
                worst = worst.max((out.get(j, c) - expect).abs());
            }
        }
    }
    worst
}

/// Endpoint, monotonicity and integrality checks of both schedules on a
/// uniform grid of `points` similarities. Returns a description of the first
/// violation.
pub fn schedule_grid_violation(points: usize) -> Option<String> {
    let (lmin, lmax, nmin, nmax) = (0.05, 1.0, 2, 10);
    if noise_schedule(1.0, lmin, lmax).unwrap() != lmin || noise_schedule(-1.0, lmin, lmax).unwrap() != lmax {
        return Some("noise endpoints".into());
    }
    if nfe_schedule(1.0, nmin, nmax).unwrap() != nmin || nfe_schedule(-1.0, nmin, nmax).unwrap() != nmax {
        return Some("step endpoints".into());
    }
    let mut prev: Option<(f64, usize, f64)> = None;
    for i in 0..points {
        let s = -1.0 + 2.0 * i as f64 / (points - 1) as f64;
        let l = noise_schedule(s, lmin, lmax).unwrap();
        let n = nfe_schedule(s, nmin, nmax).unwrap();
        let raw = nfe_schedule_unrounded(s, nmin, nmax).unwrap();
        if !(nmin..=nmax).contains(&n) || (n as f64 - raw).abs() > 0.5 {
            return Some(format!("N = {n} at s = {s}"));
        }
        if let Some((pl, pn, praw)) = prev {
            if l > pl || n > pn || raw > praw {
                return Some(format!("not non-increasing at s = {s}"));
            }
        }
        prev = Some((l, n, raw));
    }
    None
}

/// Monte-Carlo check of `λ = 1` prior samples: every entry's sample mean and
/// sample variance within `bands` standard errors. Returns the worst
/// normalized deviation of each.
pub fn prior_moment_z(seed: u64, samples: usize) -> (f64, f64) {
    let mut rng = substream(seed, "prior-moments");
    let (h, a) = (4, 2);
    let mean = chunk(&mut rng, h, a);
    let var = chunk(&mut rng, h, a).map(|x| 0.05 + x * x);
    let prior = TaskPrior { mean, var, similarity: 0.0 };
    let schedule = SamplerSchedule { noise_scale: 1.0, nfe: 1 };
    let draws: Vec<ActionChunk> = (0..samples).map(|_| sample_prior_init(&prior, &schedule, &mut rng)).collect();
    let n = samples as f64;
    let (mut zm, mut zv): (f64, f64) = (0.0, 0.0);
    for e in 0..h * a {
        let xs: Vec<f64> = draws.iter().map(|d| d.as_slice()[e]).collect();
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let (mu, sigma2) = (prior.mean.as_slice()[e], prior.var.as_slice()[e]);
        zm = zm.max((m - mu).abs() / (sigma2 / n).sqrt());
        zv = zv.max((v - sigma2).abs() / (sigma2 * (2.0 / (n - 1.0)).sqrt()));
    }
    (zm, zv)
}
