mod common;

use attnvo::dataset::{self, SplitConfig};
use attnvo::se3::{self, exp_map, Pose};
use proptest::prelude::*;

#[test]
fn fixture_sequences_load() {
    for (id, frames) in [("00", 20), ("01", 20), ("03", 60)] {
        let record = dataset::load_sequence(&common::fixture_root(), id).unwrap();
        assert_eq!(record.len(), frames);
        assert_eq!(record.global_poses[0], Pose::identity());
    }
    assert!(dataset::load_sequence(&common::fixture_root(), "42").is_err());
}

#[test]
fn window_motions_match_pose_ratios() {
    let record = dataset::load_sequence(&common::fixture_root(), "03").unwrap();
    let cfg = SplitConfig { seed: 4, ..SplitConfig::default() };
    let windows = dataset::sample_windows(&record, &cfg, 6, common::FIXTURE_SIZE).unwrap();
    for w in &windows {
        let len = w.frames.len();
        assert!((5..=10).contains(&len));
        assert_eq!(w.num_pairs(), len - 1);
        assert_eq!(w.frames[0].dim(), (3, 64, 208));
        let mut chained = Pose::identity();
        for (k, (pose, xi)) in w.relative_poses.iter().zip(&w.relative_twists).enumerate() {
            let a = record.global_poses[w.start_index + k].matrix();
            let b = record.global_poses[w.start_index + k + 1].matrix();
            let expected = a.try_inverse().unwrap() * b;
            assert!((pose.matrix() - expected).amax() < 1e-10);
            assert!((exp_map(xi).unwrap().matrix() - expected).amax() < 1e-10);
            chained = chained.compose(&exp_map(xi).unwrap());
        }
        let span = se3::relative(&record.global_poses[w.start_index], &record.global_poses[w.start_index + len - 1]);
        assert!((chained.matrix() - span.matrix()).amax() < 1e-8);
    }
}

#[test]
fn window_sampling_is_reproducible() {
    let record = dataset::load_sequence(&common::fixture_root(), "00").unwrap();
    let cfg = SplitConfig::default();
    let a = dataset::sample_window_spans(&record, &cfg, 20).unwrap();
    let b = dataset::sample_window_spans(&record, &cfg, 20).unwrap();
    assert_eq!(a, b);
    let other = dataset::sample_window_spans(&record, &SplitConfig { seed: 1, ..cfg }, 20).unwrap();
    assert_ne!(a, other);
}

#[test]
fn pose_file_round_trip() {
    let record = dataset::load_sequence(&common::fixture_root(), "01").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("01.txt");
    dataset::write_pose_file(&path, &record.global_poses).unwrap();
    let back = dataset::parse_pose_file(&path).unwrap();
    for (a, b) in back.iter().zip(&record.global_poses) {
        assert!((a.matrix() - b.matrix()).amax() < 1e-12);
    }
}

proptest! {
    #[test]
    fn validation_split_partitions_input(n in 1usize..300, seed in any::<u64>(), fraction in 0.0f64..0.5) {
        let cfg = SplitConfig { seed, validation_fraction: fraction, ..SplitConfig::default() };
        let items: Vec<usize> = (0..n).collect();
        let (train, val) = dataset::split_validation(items, &cfg).unwrap();
        prop_assert_eq!(val.len(), dataset::validation_count(n, fraction));
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(val.windows(2).all(|w| w[0] < w[1]));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..200, seed in any::<u64>(), epoch in 0usize..50) {
        let mut order = dataset::epoch_order(n, seed, epoch);
        prop_assert_eq!(order.clone(), dataset::epoch_order(n, seed, epoch));
        order.sort();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }
}
