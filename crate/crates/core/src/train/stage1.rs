//! Stage 1: conditional flow matching from a standard-normal source.

use rand::Rng as _;

use super::{optimize, Stage1Config, TrainLog};
use crate::error::{Error, Result};
use crate::flow::{ActionChunk, CfmItem, CfmLoss, FlowPolicy, Normalizer, VelocityNet};
use crate::nn::{backward, ParamStore};
use crate::rng::{substream, Rng};
use crate::taskgen::{context_dim, position_offset, Dataset, DemoRole, FamilyRegistry};

pub struct Stage1Output {
    pub policy: FlowPolicy,
    pub log: TrainLog,
}

/// `(context, chunk)` for every chunk of every training demo, in action units.
fn training_chunks(dataset: &Dataset, registry: &FamilyRegistry) -> Result<Vec<(Vec<f64>, ActionChunk)>> {
    let mut out = Vec::new();
    for (_, demo) in dataset.demos_with_role(DemoRole::Train) {
        for c in 0..dataset.num_chunks(demo) {
            out.push((dataset.chunk_context(registry, demo, c)?, dataset.chunk(demo, c)?));
        }
    }
    Ok(out)
}

/// Policy shell with per-dimension statistics fitted over every training row
/// (relative to the anchor when one is set), scaled to `spread`.
fn fitted_policy(
    net: VelocityNet,
    chunks: &[(Vec<f64>, ActionChunk)],
    anchor: Option<usize>,
    spread: f64,
    suite_fingerprint: &str,
) -> Result<FlowPolicy> {
    let mut policy = FlowPolicy {
        net,
        store: ParamStore::new(),
        normalizer: Normalizer::identity(crate::taskgen::ACTION_DIM),
        anchor,
        suite_fingerprint: suite_fingerprint.to_string(),
    };
    let shifted = chunks.iter().map(|(c, x)| policy.encode(c, x)).collect::<Result<Vec<_>>>()?;
    policy.normalizer = Normalizer::fit(shifted.iter().flat_map(|x| x.iter_rows()), crate::taskgen::ACTION_DIM)?.with_spread(spread)?;
    Ok(policy)
}

/// Draw a flow-matching batch: uniform chunk, `x0 ~ N(0, I)`, `t ~ U[0, 1)`.
pub fn cfm_batch(pool: &[(Vec<f64>, ActionChunk)], batch_size: usize, rng: &mut Rng) -> Vec<CfmItem> {
    (0..batch_size)
        .map(|_| {
            let (context, x1) = &pool[rng.random_range(0..pool.len())];
            let (h, a) = x1.shape();
            CfmItem {
                context: context.clone(),
                x0: ActionChunk::standard_normal(h, a, rng),
                x1: x1.clone(),
                t: rng.random::<f64>(),
            }
        })
        .collect()
}

pub fn stage1_train(dataset: &Dataset, registry: &FamilyRegistry, config: &Stage1Config, seed: u64) -> Result<Stage1Output> {
    config.optim.validate("stage1")?;
    let raw = training_chunks(dataset, registry)?;
    if raw.is_empty() {
        return Err(Error::invalid("no training chunks"));
    }
    let net = VelocityNet::new(dataset.horizon(), crate::taskgen::ACTION_DIM, context_dim(registry), &config.hidden)?;
    let anchor = config.relative_actions.then(|| position_offset(registry));
    let mut policy = fitted_policy(net, &raw, anchor, config.action_spread, &dataset.suite_fingerprint)?;
    let pool = raw
        .into_iter()
        .map(|(c, x)| {
            let z = policy.encode(&c, &x)?;
            Ok((c, z))
        })
        .collect::<Result<Vec<_>>>()?;
    let net = policy.net.clone();
    let mut store = ParamStore::new();
    net.init(&mut store, &mut substream(seed, "stage1/init"))?;

    let mut rng = substream(seed, "stage1/batches");
    let mut log = TrainLog::new(1, seed, config.optim.smoothing);
    optimize(&mut store, &config.optim, &mut log, |_, store| {
        let batch = cfm_batch(&pool, config.optim.batch_size, &mut rng);
        backward(&CfmLoss { net: &net, batch: &batch }, store)
    })?;
    policy.store = store;
    Ok(Stage1Output { policy, log })
}
