mod common;

use dualmem::gpm::*;
use dualmem::rng::substream;
use proptest::prelude::*;

#[test]
fn topk_matches_exhaustive_scan() {
    for (seed, size, k) in [(0, 100, 8), (1, 1000, 1), (2, 1000, 16), (3, 10, 10)] {
        assert!(common::topk_matches_scan(seed, size, k), "bank {size}, k {k}");
    }
}

#[test]
fn compose_prior_matches_two_pass_moments() {
    assert!(common::compose_prior_deviation(0, 500) < 1e-10);
}

#[test]
fn session_steps_match_uncached_recomputation() {
    for seed in 0..5 {
        assert!(common::session_matches_recomputation(seed));
    }
}

#[test]
fn resampling_matches_linear_interpolation() {
    assert!(common::resample_deviation(0, 300) < 1e-12);
}

#[test]
fn schedules_on_a_grid() {
    assert_eq!(common::schedule_grid_violation(1000), None);
}

#[test]
fn unit_noise_prior_samples_have_the_prior_moments() {
    let (zm, zv) = common::prior_moment_z(0, 10_000);
    assert!(zm < 4.0 && zv < 4.0, "mean z {zm}, variance z {zv}");
}

#[test]
fn session_progress_saturates_and_schedule_is_fixed() {
    let mut rng = substream(5, "progress");
    let bank = common::random_bank(&mut rng, 12, 4, 3, 1);
    let query = common::unit(&mut rng, 4);
    let mut session = EpisodeSession::from_query(&bank, query, GpmConfig::default(), 20.0, |_| true).unwrap();
    let first = session.schedule();
    for _ in 0..(20f64 / 4.0).ceil() as usize {
        assert_eq!(session.step(4).unwrap().1, first);
    }
    assert_eq!(session.progress(), 1.0);
    session.step(4).unwrap();
    assert_eq!(session.progress(), 1.0);
}

#[test]
fn session_prior_at_start_uses_first_windows() {
    let mut rng = substream(6, "start");
    let bank = common::random_bank(&mut rng, 10, 4, 3, 2);
    let query = common::unit(&mut rng, 4);
    let config = GpmConfig { k: 3, ..GpmConfig::default() };
    let session = EpisodeSession::from_query(&bank, query, config, 10.0, |_| true).unwrap();
    let r = session.retrieval();
    let chunks: Vec<_> = r
        .neighbors
        .iter()
        .map(|n| resample_chunk(&extract_aligned_chunk(bank.entry(n.index), 0.0).unwrap(), 5).unwrap())
        .collect();
    assert_eq!(
        session.prior_at_progress(5).unwrap(),
        compose_prior(&chunks, &r.weights, r.similarity, config.var_floor).unwrap()
    );
    let (w, s) = weights_and_similarity(&r.neighbors.iter().map(|n| n.score).collect::<Vec<_>>(), config.temperature).unwrap();
    assert_eq!((w, s), (r.weights.clone(), session.similarity()));
}

#[test]
fn bank_round_trip_and_corruption() {
    let mut rng = substream(7, "bank-io");
    let bank = common::random_bank(&mut rng, 20, 4, 3, 1);
    let bytes = bank.to_bytes();
    assert_eq!(MemoryBank::from_bytes(&bytes).unwrap(), bank);
    for i in (0..bytes.len()).step_by(bytes.len() / 40 + 1) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x01;
        assert!(MemoryBank::from_bytes(&bad).is_err(), "flip at {i} undetected");
    }
    assert!(MemoryBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

proptest! {
    #[test]
    fn weights_form_a_simplex_and_similarity_is_bounded(scores in prop::collection::vec(-1.0f64..=1.0, 1..12), tau in 0.01f64..2.0) {
        let (w, s) = weights_and_similarity(&scores, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
    }

    #[test]
    fn aligned_window_stays_inside_the_trajectory(len in 4usize..40, window in 1usize..4, stride in 1usize..4, rho in 0.0f64..=1.0) {
        let mut rng = substream(len as u64, "window");
        let entry = MemoryEntry {
            key: common::unit(&mut rng, 3),
            trajectory: common::chunk(&mut rng, len, 2),
            window,
            stride,
            task_id: "t".into(),
        };
        let c = extract_aligned_chunk(&entry, rho).unwrap();
        prop_assert_eq!(c.shape(), (window, 2));
        let u = (rho * (entry.window_count() - 1) as f64).floor() as usize;
        prop_assert_eq!(c.row(0), entry.trajectory.row(u.min(entry.window_count() - 1) * stride));
    }

    #[test]
    fn prior_variance_respects_the_floor(seed in 0u64..1000, k in 1usize..5) {
        let mut rng = substream(seed, "floor");
        let chunks: Vec<_> = (0..k).map(|_| common::chunk(&mut rng, 3, 2)).collect();
        let w = vec![1.0 / k as f64; k];
        let p = compose_prior(&chunks, &w, 0.0, 1e-3).unwrap();
        prop_assert!(p.var.as_slice().iter().all(|v| *v >= 1e-3));
    }
}
