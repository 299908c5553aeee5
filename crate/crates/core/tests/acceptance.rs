//! Acceptance runner: one PASS/FAIL line per criterion.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use dualmem::eval::{default_grid, episode_plan, median, run_episodes, sweep, EpisodeResult, RolloutSettings, StrategyRegistry, Summary};
use dualmem::flow::FlowPolicy;
use dualmem::gpm::{MemoryBank, PriorHead};
use dualmem::lcm::LocalConsistency;
use dualmem::taskgen::{build_dataset, Dataset, FamilyRegistry, Split};
use dualmem::train::{build_memory_bank, stage1_train, stage2_train, stage3_train, stage_seed, PipelineConfig, TrainedStack};

const SEED: u64 = 42;
const EPISODES: usize = 100;

struct Report {
    passed: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, ok: bool, detail: String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        }
        println!("[{}] criterion {id} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

struct Timed {
    stack: TrainedStack,
    stage2: Duration,
    total: Duration,
}

fn train(registry: &FamilyRegistry, config: &PipelineConfig, seed: u64) -> Timed {
    let started = Instant::now();
    let dataset = build_dataset(registry, &config.data, stage_seed(seed, "data")).unwrap();
    let s1 = stage1_train(&dataset, registry, &config.stage1, stage_seed(seed, "stage1")).unwrap();
    let t2 = Instant::now();
    let s2 = stage2_train(&dataset, registry, &config.stage2, stage_seed(seed, "stage2")).unwrap();
    let stage2 = t2.elapsed();
    let bank = build_memory_bank(&dataset, registry, &s2.head).unwrap();
    let s3 = stage3_train(&dataset, registry, &bank, &s2.head, config.gpm, config.lcm, &config.stage3, stage_seed(seed, "stage3")).unwrap();
    Timed {
        stack: TrainedStack {
            dataset,
            policy: s1.policy,
            head: s2.head,
            bank,
            lcm: s3.lcm,
            margin: s2.margin,
            logs: [s1.log, s2.log, s3.log],
        },
        stage2,
        total: started.elapsed(),
    }
}

fn episodes(registry: &FamilyRegistry, stack: &TrainedStack, config: &PipelineConfig, mode: &str, nfe: Option<usize>) -> Vec<EpisodeResult> {
    let strategies = StrategyRegistry::default();
    let plan = episode_plan(&stack.dataset, Split::Seen, EPISODES, SEED).unwrap();
    let settings = RolloutSettings {
        nfe_override: nfe,
        success_threshold: config.eval.success_threshold,
    };
    run_episodes(registry, &stack.dataset, stack.stack(config), strategies.get(mode).unwrap(), settings, &plan).unwrap()
}

fn nfe_per_chunk(results: &[EpisodeResult]) -> f64 {
    let nfe: u64 = results.iter().map(|r| r.nfe).sum();
    let chunks: usize = results.iter().map(|r| r.trace.len()).sum();
    nfe as f64 / chunks as f64
}

/// Every artifact of a run as bytes.
fn artifacts(registry: &FamilyRegistry, stack: &TrainedStack, config: &PipelineConfig) -> Vec<(&'static str, Vec<u8>)> {
    let strategies = StrategyRegistry::default();
    let grid = default_grid(&strategies, &config.eval.sweep_nfe);
    let report = sweep(registry, &stack.dataset, stack.stack(config), &strategies, &grid, Split::Seen, 20, SEED, config.eval.success_threshold).unwrap();
    let dir = tempfile::tempdir().unwrap();
    stack.dataset.save(dir.path()).unwrap();
    vec![
        ("dataset", std::fs::read(dir.path().join("trajectories.bin")).unwrap()),
        ("manifest", std::fs::read(dir.path().join("manifest.json")).unwrap()),
        ("policy", stack.policy.to_checkpoint().unwrap().to_bytes().unwrap()),
        ("prior head", stack.head.to_checkpoint().unwrap().to_bytes().unwrap()),
        ("lcm", stack.lcm.to_checkpoint().unwrap().to_bytes().unwrap()),
        ("bank", stack.bank.to_bytes()),
        ("sweep csv", report.to_csv().unwrap()),
    ]
}

/// Save and reload every artifact; compare bit-exactly; then flip single
/// bytes across each file and require every load to fail.
fn round_trips(registry: &FamilyRegistry, stack: &TrainedStack, dir: &Path) -> Result<(), String> {
    let suite = Some(stack.dataset.suite_fingerprint.as_str());
    stack.dataset.save(&dir.join("data")).unwrap();
    if Dataset::load(&dir.join("data"), registry).map_err(|e| e.to_string())? != stack.dataset {
        return Err("dataset differs after reload".into());
    }
    let files = [
        ("policy.ckpt", Box::new(|p: &Path| FlowPolicy::load(p, suite).map(|x| x == stack.policy)) as Box<dyn Fn(&Path) -> dualmem::Result<bool>>),
        ("head.ckpt", Box::new(|p: &Path| PriorHead::load(p, suite).map(|x| x == stack.head))),
        ("lcm.ckpt", Box::new(|p: &Path| LocalConsistency::load(p, suite).map(|x| x == stack.lcm))),
        ("bank.bin", Box::new(|p: &Path| MemoryBank::load(p).map(|x| x == stack.bank))),
        ("data/trajectories.bin", Box::new(|p: &Path| Dataset::load(p.parent().unwrap(), registry).map(|x| x == stack.dataset))),
    ];
    stack.policy.save(&dir.join("policy.ckpt")).unwrap();
    stack.head.save(&dir.join("head.ckpt")).unwrap();
    stack.lcm.save(&dir.join("lcm.ckpt")).unwrap();
    stack.bank.save(&dir.join("bank.bin")).unwrap();
    for (name, load) in &files {
        let path = dir.join(name);
        if !load(&path).map_err(|e| format!("{name}: {e}"))? {
            return Err(format!("{name} differs after reload"));
        }
        let original = std::fs::read(&path).unwrap();
        let stride = (original.len() / 64).max(1);
        for i in (0..original.len()).step_by(stride).chain([original.len() - 1]) {
            let mut bad = original.clone();
            bad[i] = bad[i].wrapping_add(1);
            std::fs::write(&path, &bad).unwrap();
            if load(&path).is_ok() {
                return Err(format!("{name}: corruption at byte {i} not detected"));
            }
        }
        std::fs::write(&path, &original).unwrap();
    }
    Ok(())
}

fn main() {
    let registry = FamilyRegistry::default();
    let mut report = Report { passed: 0, total: 0 };

    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        for (_, err) in common::gradient_suite(seed) {
            worst = worst.max(err);
        }
    }
    let elapsed = started.elapsed();
    report.line(
        1,
        "gradient suite",
        worst < common::GRAD_TOLERANCE && elapsed < Duration::from_secs(60),
        format!("max relative error {worst:.2e} over 10 seeds x 6 modules in {:.2}s", elapsed.as_secs_f64()),
    );

    let sizes = [10, 100, 1000, 10_000];
    let topk = sizes.iter().zip(0u64..).all(|(&n, s)| [1, 8, 32.min(n)].iter().all(|&k| common::topk_matches_scan(s, n, k)));
    let compose = common::compose_prior_deviation(1, 2000);
    let session = (0..20).all(common::session_matches_recomputation);
    let resample = common::resample_deviation(2, 2000);
    report.line(
        2,
        "oracle equivalences",
        topk && compose < 1e-10 && session && resample < 1e-12,
        format!("top-k vs scan (banks to 1e4) {topk}; compose deviation {compose:.1e}; session bit-exact {session}; resample deviation {resample:.1e}"),
    );

    let violation = common::schedule_grid_violation(1000);
    report.line(3, "schedules", violation.is_none(), violation.unwrap_or_else(|| "endpoints exact, monotone and integral on 1e3 points".into()));

    let (zm, zv) = common::prior_moment_z(3, 10_000);
    report.line(
        4,
        "unit-noise prior moments",
        zm < 4.0 && zv < 4.0,
        format!("worst standard-error z: mean {zm:.2}, variance {zv:.2} (1e4 samples)"),
    );

    let config = PipelineConfig::default();
    let run = train(&registry, &config, SEED);
    let stack = &run.stack;
    report.line(
        5,
        "prior-head margin",
        stack.margin.margin >= 0.2 && run.stage2 < Duration::from_secs(300),
        format!(
            "held-out margin {:.3} (intra {:.3}, inter {:.3}); stage-2 training {:.1}s",
            stack.margin.margin,
            stack.margin.intra,
            stack.margin.inter,
            run.stage2.as_secs_f64()
        ),
    );

    let eval_started = Instant::now();
    let nfe_max = config.gpm.bounds.nfe_max;
    let gauss = episodes(&registry, stack, &config, "gaussian-init", Some(nfe_max));
    let gpm = episodes(&registry, stack, &config, "gpm-init", None);
    let full = episodes(&registry, stack, &config, "gpm+lcm", None);
    let end_to_end = run.total + eval_started.elapsed();
    let (sg, sp, sf) = (Summary::of(&gauss).unwrap(), Summary::of(&gpm).unwrap(), Summary::of(&full).unwrap());
    let nfe = nfe_per_chunk(&gpm);
    report.line(
        6,
        "prior initialization efficiency",
        sp.median_error <= sg.median_error && nfe <= 0.5 * nfe_max as f64 && end_to_end < Duration::from_secs(900),
        format!(
            "seen split, {EPISODES} paired episodes: median error gpm-init {:.4} vs gaussian-init@{nfe_max} {:.4}; mean NFE per chunk {nfe:.2} (limit {:.1}); end-to-end {:.0}s",
            sp.median_error,
            sg.median_error,
            0.5 * nfe_max as f64,
            end_to_end.as_secs_f64()
        ),
    );

    let disc = |r: &[EpisodeResult]| median(&mut r.iter().filter_map(|e| e.discontinuity).collect::<Vec<_>>()).unwrap();
    let (dp, df) = (disc(&gpm), disc(&full));
    report.line(
        7,
        "consistency ablation",
        df < dp && sf.success_rate >= sp.success_rate - 0.01,
        format!(
            "median discontinuity gpm+lcm {df:.6} vs gpm-init {dp:.6} over {EPISODES} seeds; success {:.2} vs {:.2}",
            sf.success_rate, sp.success_rate
        ),
    );

    let first = artifacts(&registry, stack, &config);
    let again = train(&registry, &config, SEED);
    let second = artifacts(&registry, &again.stack, &config);
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0).collect();
    let dir = tempfile::tempdir().unwrap();
    let io = round_trips(&registry, stack, dir.path());
    report.line(
        8,
        "reproducibility and integrity",
        differing.is_empty() && io.is_ok(),
        format!(
            "re-run differs in {:?}; round trips and single-byte corruption: {}",
            differing,
            io.err().unwrap_or_else(|| "ok".into())
        ),
    );

    println!("acceptance: {}/{} criteria pass", report.passed, report.total);
}
