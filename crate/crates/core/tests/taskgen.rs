use std::collections::HashSet;

use dualmem::taskgen::*;

fn registry() -> FamilyRegistry {
    FamilyRegistry::default()
}

fn small_data() -> DataConfig {
    DataConfig {
        tasks_per_family: 2,
        demos_per_task: 4,
        validation_demos_per_task: 1,
        ..DataConfig::default()
    }
}

#[test]
fn sampled_parameters_stay_in_range() {
    let reg = registry();
    for family in reg.names() {
        let ranges = reg.get(family).unwrap().ranges().0;
        for seed in 0..10_000 / reg.len() as u64 + 1 {
            let t = sample_task(&reg, family, seed).unwrap();
            for (v, (lo, hi)) in t.params.to_array().into_iter().zip(ranges) {
                assert!((lo..=hi).contains(&v), "{family} seed {seed}: {v} outside [{lo}, {hi}]");
            }
        }
    }
}

#[test]
fn distinct_seeds_rarely_collide() {
    let reg = registry();
    let draws: HashSet<String> = (0..1000)
        .map(|s| serde_json::to_string(&sample_task(&reg, "reach", s).unwrap().params).unwrap())
        .collect();
    assert!(draws.len() >= 990, "{} distinct of 1000", draws.len());
    assert_eq!(sample_task(&reg, "arc", 3).unwrap(), sample_task(&reg, "arc", 3).unwrap());
}

#[test]
fn noise_free_paths_are_exact_and_within_curvature_bound() {
    let reg = registry();
    for family in reg.names() {
        let fam = reg.get(family).unwrap();
        let t_len = fam.episode_len();
        let bound = fam.curvature_bound(t_len);
        for seed in 0..50 {
            let task = sample_task(&reg, family, seed).unwrap();
            let traj = expert_trajectory(&reg, &task, t_len, DemoNoise::NONE, 0).unwrap();
            assert_eq!(traj.row(0), task.params.start.as_slice());
            let last = traj.row(t_len - 1);
            assert!((last[0] - task.params.goal[0]).abs() < 1e-12 && (last[1] - task.params.goal[1]).abs() < 1e-12);
            for i in 1..t_len - 1 {
                let dd: f64 = (0..2)
                    .map(|d| (traj.get(i + 1, d) - 2.0 * traj.get(i, d) + traj.get(i - 1, d)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dd <= bound * (1.0 + 1e-9), "{family} seed {seed} step {i}: {dd} > {bound}");
            }
        }
    }
}

#[test]
fn noisy_endpoints_within_noise_bound() {
    let reg = registry();
    let noise = DemoNoise { std: 0.01, correlation: 0.9 };
    for seed in 0..200 {
        let task = sample_task(&reg, "wave", seed).unwrap();
        let t_len = reg.get("wave").unwrap().episode_len();
        let traj = expert_trajectory(&reg, &task, t_len, noise, seed).unwrap();
        for (row, target) in [(0, task.params.start), (t_len - 1, task.params.goal)] {
            for d in 0..2 {
                assert!((traj.get(row, d) - target[d]).abs() < 6.0 * noise.std);
            }
        }
    }
}

#[test]
fn context_layout() {
    let reg = registry();
    let task = sample_task(&reg, "hook", 1).unwrap();
    let obs = observe(&task, &task.params.start).unwrap();
    let a = featurize(&reg, &task, &obs).unwrap();
    assert_eq!(a.len(), context_dim(&reg));
    assert_eq!(a, featurize(&reg, &task, &obs).unwrap());
    let moved = observe(&task, &task.params.goal).unwrap();
    let b = featurize(&reg, &task, &moved).unwrap();
    let p = position_offset(&reg);
    assert_eq!(a[..p], b[..p]);
    assert_eq!(&b[p..p + 2], task.params.goal.as_slice());
}

#[test]
fn dataset_partitions_and_counts() {
    let reg = registry();
    let cfg = small_data();
    let ds = build_dataset(&reg, &cfg, 11).unwrap();
    let mut seen = HashSet::new();
    for t in &ds.tasks {
        for &d in &t.demos {
            assert!(seen.insert(d), "demo {d} in two tasks");
            assert_eq!(ds.demos[d].task, ds.tasks.iter().position(|x| x.id == t.id).unwrap());
        }
        let count = |role| t.demos.iter().filter(|&&d| ds.demos[d].role == role).count();
        match t.split {
            Split::Seen => {
                assert_eq!(count(DemoRole::Train), cfg.demos_per_task - cfg.validation_demos_per_task);
                assert_eq!(count(DemoRole::Validation), cfg.validation_demos_per_task);
            }
            Split::Unseen => assert_eq!(count(DemoRole::Unseen), cfg.demos_per_task),
        }
    }
    assert_eq!(seen.len(), ds.demos.len());
    let unseen_families: HashSet<&str> = ds.tasks.iter().filter(|t| t.split == Split::Unseen).map(|t| t.descriptor.family.as_str()).collect();
    assert!(unseen_families.contains("loop"));
    assert!(ds.tasks.iter().filter(|t| t.descriptor.family == "loop").all(|t| t.split == Split::Unseen));
}

#[test]
fn regeneration_is_bit_identical_and_seed_dependent() {
    let reg = registry();
    let cfg = small_data();
    let a = build_dataset(&reg, &cfg, 5).unwrap();
    let b = build_dataset(&reg, &cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), build_dataset(&reg, &cfg, 6).unwrap().fingerprint());
}

#[test]
fn dataset_save_load_round_trip_and_tamper_detection() {
    let reg = registry();
    let ds = build_dataset(&reg, &small_data(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path(), &reg).unwrap(), ds);

    let store = dir.path().join("trajectories.bin");
    let mut bytes = std::fs::read(&store).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&store, &bytes).unwrap();
    assert!(Dataset::load(dir.path(), &reg).is_err());

    std::fs::remove_file(&store).unwrap();
    let err = Dataset::load(dir.path(), &reg).unwrap_err().to_string();
    assert!(err.contains("trajectories.bin"), "{err}");
}

#[test]
fn chunks_tile_each_demonstration() {
    let reg = registry();
    let ds = build_dataset(&reg, &small_data(), 2).unwrap();
    let h = ds.horizon();
    for d in ds.demos.iter().take(10) {
        let n = ds.num_chunks(d);
        assert_eq!(n * h, d.trajectory.rows());
        for c in 0..n {
            let chunk = ds.chunk(d, c).unwrap();
            assert_eq!(chunk.row(0), d.trajectory.row(c * h));
            let ctx = ds.chunk_context(&reg, d, c).unwrap();
            assert_eq!(ctx.len(), context_dim(&reg));
        }
    }
}

#[test]
fn invalid_configs_rejected() {
    let reg = registry();
    for cfg in [
        DataConfig { horizon: 5, ..small_data() },
        DataConfig { demos_per_task: 1, ..small_data() },
        DataConfig { noise_correlation: 1.0, ..small_data() },
        DataConfig { unseen_families: vec!["nope".into()], ..small_data() },
    ] {
        assert!(build_dataset(&reg, &cfg, 0).is_err(), "{cfg:?}");
    }
}
