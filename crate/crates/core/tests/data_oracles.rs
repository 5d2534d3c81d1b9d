use std::f64::consts::TAU;

use gmd_core::data::*;
use gmd_core::engine::stream_rng;
use gmd_core::metrics::{mean_slip_score, slip_score};
use gmd_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec { count_per_label: 20, seed, ..DatasetSpec::default() }
}

/// Unwrapped turning of the displacement vectors along a raw path.
fn turning(x: &Tensor<f64>) -> f64 {
    let angles: Vec<f64> = (0..x.cols() - 1)
        .map(|i| (x.at(Z, i + 1) - x.at(Z, i)).atan2(x.at(X, i + 1) - x.at(X, i)))
        .collect();
    angles
        .windows(2)
        .map(|w| {
            let mut d = w[1] - w[0];
            while d > std::f64::consts::PI {
                d -= TAU;
            }
            while d < -std::f64::consts::PI {
                d += TAU;
            }
            d
        })
        .sum()
}

#[test]
fn circles_turn_once() {
    let ds = generate_dataset(&small_spec(1)).unwrap();
    for s in ds.sequences.iter().filter(|s| s.label == MotionLabel::Circle) {
        let total = turning(&s.data).abs();
        assert!((total / TAU - 1.0).abs() < 0.1, "turned {total}");
    }
}

#[test]
fn straight_walks_are_colinear_and_forward() {
    let ds = generate_dataset(&small_spec(2)).unwrap();
    for s in ds.sequences.iter().filter(|s| s.label == MotionLabel::Straight) {
        let x = &s.data;
        for i in 0..x.cols() {
            assert!(x.at(Z, i).abs() < 1e-12);
            assert!(x.at(ROT, i).abs() < 1e-12);
            if i > 0 {
                assert!(x.at(X, i) > x.at(X, i - 1));
            }
        }
    }
}

#[test]
fn turns_bend_the_way_their_label_says() {
    let ds = generate_dataset(&small_spec(3)).unwrap();
    for s in &ds.sequences {
        let t = turning(&s.data);
        match s.label {
            MotionLabel::LeftTurn => assert!(t > 0.9, "left turned {t}"),
            MotionLabel::RightTurn => assert!(t < -0.9, "right turned {t}"),
            _ => {}
        }
    }
}

#[test]
fn every_sequence_starts_at_the_origin_facing_forward() {
    let ds = generate_dataset(&small_spec(4)).unwrap();
    for s in &ds.sequences {
        assert_eq!((s.data.at(ROT, 0), s.data.at(X, 0), s.data.at(Z, 0)), (0.0, 0.0, 0.0));
        assert_eq!(s.data.shape(), &[CHANNELS, 64]);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_dataset(&small_spec(7)).unwrap();
    let b = generate_dataset(&small_spec(7)).unwrap();
    let c = generate_dataset(&small_spec(8)).unwrap();
    assert_eq!(a.sequences, b.sequences);
    assert_ne!(a.sequences, c.sequences);
}

#[test]
fn split_is_stratified_ninety_ten() {
    let ds = generate_dataset(&small_spec(5)).unwrap();
    let (train, val) = ds.split();
    assert_eq!(train.len(), 108);
    assert_eq!(val.len(), 12);
    for l in MotionLabel::ALL {
        assert_eq!(val.iter().filter(|s| s.label == l).count(), 2);
    }
}

#[test]
fn speed_channel_tracks_root_displacement() {
    let spec = small_spec(6);
    let ds = generate_dataset(&spec).unwrap();
    let seqs: Vec<Tensor<f64>> = ds.sequences.iter().map(|s| s.data.clone()).collect();
    let raw = mean_slip_score(&seqs).unwrap();
    // The only mismatch is observation noise: E|N(0, σ²)| = σ √(2/π).
    let expected = spec.noise_sigma * (2.0 / std::f64::consts::PI).sqrt();
    assert!((raw - expected).abs() < 0.1 * expected, "slip {raw} vs {expected}");
    assert!(raw < 3.0 * spec.noise_sigma);

    let clean = DatasetSpec { noise_sigma: 0.0, ..spec };
    let clean_seqs: Vec<Tensor<f64>> = generate_dataset(&clean).unwrap().sequences.into_iter().map(|s| s.data).collect();
    assert!(mean_slip_score(&clean_seqs).unwrap() < 1e-12);
}

#[test]
fn swapping_in_another_trajectory_raises_slip() {
    let ds = generate_dataset(&small_spec(6)).unwrap();
    let seqs: Vec<Tensor<f64>> = ds.sequences.iter().map(|s| s.data.clone()).collect();
    let mut own = 0.0;
    let mut swapped = 0.0;
    for (i, s) in seqs.iter().enumerate() {
        let other = &seqs[(i + 37) % seqs.len()];
        let mut x = s.clone();
        for r in TRAJ_CHANNELS {
            x.row_mut(r).copy_from_slice(other.row(r));
        }
        own += slip_score(s).unwrap();
        swapped += slip_score(&x).unwrap();
    }
    assert!(swapped > 1.5 * own, "own {own} swapped {swapped}");
}

#[test]
fn normalization_round_trip() {
    let ds = generate_dataset(&small_spec(9)).unwrap();
    let stats = NormStats::fit(ds.sequences.iter().map(|s| &s.data)).unwrap();
    for s in ds.sequences.iter().take(10) {
        let n = stats.apply_tensor(&s.data).unwrap();
        assert!(stats.invert_tensor(&n).unwrap().max_abs_diff(&s.data).unwrap() < 1e-12);
    }
    let all: Vec<Tensor<f64>> = ds.sequences.iter().map(|s| stats.apply_tensor(&s.data).unwrap()).collect();
    let refit = NormStats::fit(all.iter()).unwrap();
    for c in 0..CHANNELS {
        assert!(refit.mean[c].abs() < 1e-9);
        assert!((refit.std[c] - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn relative_and_absolute_roots_round_trip(seed in 0u64..1000, m in 2usize..40) {
        let mut rng = stream_rng(seed, 0);
        let mut heading = vec![0.0];
        for _ in 1..m {
            let h = heading.last().unwrap() + rng.gen_range(-0.5..0.5);
            heading.push(h);
        }
        let speeds: Vec<f64> = (0..m - 1).map(|_| rng.gen_range(0.0..0.2)).collect();
        let raw = MotionSeq::new(synthesize(&heading, &speeds).unwrap(), Representation::Raw);
        let rel = abs_to_rel(&raw).unwrap();
        let back = rel_to_abs(&rel).unwrap();
        prop_assert!(back.data.max_abs_diff(&raw.data).unwrap() < 1e-10);
        for r in [ROT, X, Z] {
            prop_assert_eq!(rel.data.at(r, m - 1), 0.0);
        }
        for (i, &speed) in speeds.iter().enumerate().take(m - 1) {
            prop_assert!(rel.data.at(Z, i).abs() < 1e-12);
            prop_assert!((rel.data.at(X, i) - speed).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesized_pose_is_a_function_of_the_path(seed in 0u64..300) {
        let mut rng = stream_rng(seed, 1);
        let m = 16;
        let heading: Vec<f64> = (0..m).map(|i| 0.1 * i as f64 * rng.gen_range(-1.0..1.0)).collect();
        let speeds: Vec<f64> = (0..m - 1).map(|_| rng.gen_range(0.04..0.12)).collect();
        let x = synthesize(&heading, &speeds).unwrap();
        let mut y = x.clone();
        for r in SPEED..CHANNELS {
            y.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        fill_pose_channels(&mut y);
        prop_assert_eq!(x, y);
    }
}
