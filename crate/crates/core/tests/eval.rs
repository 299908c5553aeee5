mod common;

use std::sync::OnceLock;

use dualmem::eval::*;
use dualmem::flow::ActionChunk;
use dualmem::rng::substream;
use dualmem::taskgen::*;
use dualmem::train::{train_all, PipelineConfig, TrainedStack};

fn trained() -> &'static (PipelineConfig, TrainedStack) {
    static STACK: OnceLock<(PipelineConfig, TrainedStack)> = OnceLock::new();
    STACK.get_or_init(|| {
        let cfg = common::quick_config();
        let stack = train_all(&FamilyRegistry::default(), &cfg, 21).unwrap();
        (cfg, stack)
    })
}

fn settings(nfe: Option<usize>) -> RolloutSettings {
    RolloutSettings {
        nfe_override: nfe,
        success_threshold: 0.05,
    }
}

#[test]
fn expert_replay_reaches_the_goal() {
    let reg = FamilyRegistry::default();
    let (cfg, stack) = trained();
    let task = &stack.dataset.tasks[0];
    let t_len = reg.get(&task.descriptor.family).unwrap().episode_len();
    let expert = expert_trajectory(&reg, &task.descriptor, t_len, DemoNoise::NONE, 0).unwrap();
    let h = stack.dataset.horizon();
    let chunks: Vec<ActionChunk> = (0..t_len / h)
        .map(|c| ActionChunk::new(h, 2, expert.as_slice()[c * h * 2..(c + 1) * h * 2].to_vec()).unwrap())
        .collect();
    let replay = ReplayGenerator { chunks };
    let strategies = StrategyRegistry::default();
    for mode in strategies.names() {
        let replay_stack = PolicyStack {
            generator: &replay,
            ..stack.stack(cfg)
        };
        let r = rollout_episode(&reg, &task.id, &task.descriptor, replay_stack, strategies.get(mode).unwrap(), settings(Some(3)), 0, &mut substream(0, "r")).unwrap();
        assert!(r.endpoint_error < 1e-12 && r.success, "{mode}: {}", r.endpoint_error);
        assert_eq!(r.nfe, 3 * (t_len / h) as u64);
    }
}

#[test]
fn modes_touch_only_their_modules() {
    let reg = FamilyRegistry::default();
    let (cfg, stack) = trained();
    let strategies = StrategyRegistry::default();
    let task = &stack.dataset.tasks[1];
    for (mode, retrievals, lcm) in [("gaussian-init", 0, false), ("gpm-init", 1, false), ("gpm+lcm", 1, true)] {
        let r = rollout_episode(&reg, &task.id, &task.descriptor, stack.stack(cfg), strategies.get(mode).unwrap(), settings(None), 4, &mut substream(4, "r")).unwrap();
        assert_eq!(r.counters.retrievals, retrievals, "{mode}");
        assert_eq!(r.counters.lcm_calls, if lcm { r.trace.len() as u64 } else { 0 }, "{mode}");
        assert_eq!(r.nfe, r.trace.iter().map(|t| t.nfe as u64).sum::<u64>());
        assert!(r.endpoint_error >= 0.0);
    }
    let bare = PolicyStack {
        memory: None,
        lcm: None,
        ..stack.stack(cfg)
    };
    assert!(rollout_episode(&reg, &task.id, &task.descriptor, bare, strategies.get("gaussian-init").unwrap(), settings(None), 0, &mut substream(0, "r")).is_ok());
    for mode in ["gpm-init", "gpm+lcm"] {
        assert!(rollout_episode(&reg, &task.id, &task.descriptor, bare, strategies.get(mode).unwrap(), settings(None), 0, &mut substream(0, "r")).is_err());
    }
    let out_of_range = rollout_episode(&reg, &task.id, &task.descriptor, stack.stack(cfg), strategies.get("gpm-init").unwrap(), settings(Some(11)), 0, &mut substream(0, "r"));
    assert!(out_of_range.is_err());
}

#[test]
fn gaussian_mode_defaults_to_the_step_ceiling() {
    let reg = FamilyRegistry::default();
    let (cfg, stack) = trained();
    let task = &stack.dataset.tasks[0];
    let r = rollout_episode(&reg, &task.id, &task.descriptor, stack.stack(cfg), &GaussianInit, settings(None), 0, &mut substream(0, "r")).unwrap();
    assert!(r.trace.iter().all(|t| t.nfe == cfg.gpm.bounds.nfe_max && t.noise_scale == 1.0));
}

#[test]
fn discontinuity_cases() {
    let c = |rows: &[[f64; 2]]| ActionChunk::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    assert_eq!(discontinuity_metric(&[c(&[[1.0, 1.0]; 3]), c(&[[1.0, 1.0]; 3])]), Some(0.0));
    assert_eq!(discontinuity_metric(&[c(&[[9.0, 9.0], [0.0, 0.0]]), c(&[[3.0, 4.0], [1.0, 1.0]])]), Some(5.0));
    assert_eq!(discontinuity_metric(&[c(&[[0.0, 0.0]])]), None);
    let a = [c(&[[0.0, 0.0], [1.0, 2.0], [5.0, 5.0]]), c(&[[2.0, 2.0], [7.0, 1.0], [3.0, 3.0]])];
    let b = [c(&[[1.0, 2.0], [0.0, 0.0], [5.0, 5.0]]), c(&[[2.0, 2.0], [3.0, 3.0], [7.0, 1.0]])];
    assert_eq!(discontinuity_metric(&a), discontinuity_metric(&b));
}

#[test]
fn episodes_are_paired_across_modes() {
    let (_, stack) = trained();
    let plan = episode_plan(&stack.dataset, Split::Seen, 12, 5).unwrap();
    assert_eq!(plan, episode_plan(&stack.dataset, Split::Seen, 12, 5).unwrap());
    assert!(plan.iter().all(|e| stack.dataset.tasks[e.task].split == Split::Seen));
}

#[test]
fn sweep_csv_is_deterministic_and_complete() {
    let reg = FamilyRegistry::default();
    let (cfg, stack) = trained();
    let strategies = StrategyRegistry::default();
    let grid = default_grid(&strategies, &[2, 10]);
    let run = || sweep(&reg, &stack.dataset, stack.stack(cfg), &strategies, &grid, Split::Seen, 6, 3, 0.05).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    let csv = String::from_utf8(a.to_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), grid.len() + 1);
    assert!(!csv.contains("wall"));
    let (gpm, gauss) = a.headline().unwrap();
    assert_eq!((gpm.cell.nfe, gauss.cell.nfe), (None, Some(10)));
    assert!(a.rows.iter().all(|r| r.summary.episodes == 6));
}

#[test]
fn ablation_covers_both_splits_in_fixed_order() {
    let reg = FamilyRegistry::default();
    let (cfg, stack) = trained();
    let strategies = StrategyRegistry::default();
    let report = ablation_report(&reg, &stack.dataset, stack.stack(cfg), &strategies, &[Split::Seen, Split::Unseen], 4, 1, 0.05).unwrap();
    let keys: Vec<(Split, &str)> = report.rows.iter().map(|r| (r.split, r.mode.as_str())).collect();
    assert_eq!(
        keys,
        vec![
            (Split::Seen, "gaussian-init"),
            (Split::Seen, "gpm-init"),
            (Split::Seen, "gpm+lcm"),
            (Split::Unseen, "gaussian-init"),
            (Split::Unseen, "gpm-init"),
            (Split::Unseen, "gpm+lcm"),
        ]
    );
    assert_eq!(String::from_utf8(report.to_csv().unwrap()).unwrap().lines().count(), 7);
}

#[test]
fn trace_file_has_one_line_per_episode() {
    let reg = FamilyRegistry::default();
    let (cfg, stack) = trained();
    let strategies = StrategyRegistry::default();
    let config = RolloutConfig {
        mode: "gpm+lcm".into(),
        nfe: None,
        episodes: 5,
        seed: 2,
        split: Split::Unseen,
    };
    let results = evaluate(&reg, &stack.dataset, stack.stack(cfg), &strategies, &config, 0.05).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    write_trace(&path, &results).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 5);
    let first: EpisodeResult = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first, results[0]);
    assert!(first.trace.iter().all(|t| t.similarity.is_some() && t.progress.is_some()));
}
