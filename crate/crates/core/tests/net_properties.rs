use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cista_core::eval::{detect_depths, match_and_rmse, DepthReadoutOptions, PeakThreshold, Point3};
use cista_core::net::{
    adam_step, backward, bce_loss, forward, infer, init_params, AdamConfig, AdamState, Architecture,
    Gradients,
};
use cista_core::selftest::gradient_check;
use cista_core::synth::SoftLabel;
use cista_core::Matrix2;

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_input_gives_head_bias(seed in any::<u64>(), layers in 1usize..4) {
        let kernels: Vec<usize> = (0..layers).map(|i| 2 * i + 1).collect();
        let mut p = init_params(&Architecture::new(5, 7, 11, kernels), (0.0, 4.0), seed, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut p.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(0.0..1.0));
        }
        p.head.bias.iter_mut().for_each(|b| *b = rng.random_range(-3.0..3.0));
        let probs = infer(&Matrix2::zeros(7, 11), &p).unwrap();
        for (pj, bj) in probs.iter().zip(&p.head.bias) {
            prop_assert!((pj - sigmoid(*bj)).abs() <= 1e-15);
        }
    }

    #[test]
    fn probabilities_lie_strictly_inside_unit_interval(seed in any::<u64>()) {
        let p = init_params(&Architecture::new(4, 5, 9, vec![3, 5]), (0.0, 3.0), seed, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix2::from_fn(5, 9, |_, _| rng.random_range(0.0..2.0));
        let (out, _) = forward(&x, &p).unwrap();
        prop_assert!(out.probs.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(infer(&x, &p).unwrap(), out.probs);
    }

    #[test]
    fn biases_stay_nonnegative_under_adam(seed in any::<u64>(), steps in 1usize..6) {
        let mut p = init_params(&Architecture::new(3, 5, 7, vec![3]), (0.0, 2.0), seed, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.5, ..Default::default() };
        for _ in 0..steps {
            let mut g = Gradients::zeros_like(&p);
            for s in g.slices_mut() {
                s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            for l in &p.layers {
                prop_assert!(l.bias.iter().all(|&b| b >= 0.0));
            }
        }
        prop_assert_eq!(st.step, steps as u64);
    }

    #[test]
    fn loss_matches_naive_formula_away_from_saturation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-6.0..6.0)).collect();
        let label = SoftLabel { values: (0..8).map(|_| rng.random_range(0.0..1.0)).collect() };
        let naive = logits
            .iter()
            .zip(&label.values)
            .map(|(&t, &y)| {
                let p = sigmoid(t);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 8.0;
        prop_assert!((bce_loss(&logits, &label).unwrap() - naive).abs() <= 1e-10);
    }

    #[test]
    fn readout_peaks_are_sorted_and_separated(seed in any::<u64>(), sep in 1usize..5, tau in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ev: Vec<f64> = (0..21).map(|_| rng.random_range(0.0..1.0)).collect();
        let grid: Vec<f64> = (0..21).map(|i| -10.0 + i as f64).collect();
        let opts = DepthReadoutOptions { threshold: PeakThreshold::Absolute(tau), min_separation: sep, centroid_radius: 0 };
        let idx: Vec<usize> = detect_depths(&ev, &grid, &opts)
            .iter()
            .map(|z| (z + 10.0).round() as usize)
            .collect();
        for w in idx.windows(2) {
            prop_assert!(ev[w[0]] >= ev[w[1]]);
        }
        for (i, a) in idx.iter().enumerate() {
            prop_assert!(ev[*a] > tau);
            for b in &idx[i + 1..] {
                prop_assert!(a.abs_diff(*b) >= sep);
            }
        }
    }

    #[test]
    fn matching_ignores_prediction_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pt = |n: usize| -> Vec<Point3> {
            (0..n)
                .map(|_| Point3 {
                    x: rng.random_range(0.0..30.0),
                    y: rng.random_range(0.0..30.0),
                    z: rng.random_range(-10.0..10.0),
                })
                .collect()
        };
        let truth = pt(6);
        let pred = pt(7);
        let mut rev = pred.clone();
        rev.reverse();
        let a = match_and_rmse(&pred, &truth, 3.0);
        let b = match_and_rmse(&rev, &truth, 3.0);
        prop_assert_eq!(a.matched(), b.matched());
        prop_assert_eq!(a.missed(), b.missed());
        prop_assert_eq!(a.spurious(), b.spurious());
        for k in 0..3 {
            prop_assert!((a.rmse()[k] - b.rmse()[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..8 {
        let (checks, head_exact) = gradient_check(seed, 1e-5).unwrap();
        assert!(head_exact, "seed {seed}");
        for c in checks {
            assert!(c.rel_error <= 1e-4, "seed {seed} tensor {}: {}", c.index, c.rel_error);
        }
    }
}

#[test]
fn perfect_logits_give_tiny_loss() {
    let label = SoftLabel { values: vec![1.0, 0.0, 0.0, 0.0] };
    assert!(bce_loss(&[40.0, -40.0, -40.0, -40.0], &label).unwrap() < 1e-12);
    let half = SoftLabel { values: vec![0.5; 4] };
    assert!((bce_loss(&[0.0; 4], &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn backward_of_perfect_prediction_is_zero() {
    let p = init_params(&Architecture::new(4, 5, 9, vec![3, 5]), (0.0, 3.0), 1, None).unwrap();
    let x = Matrix2::from_fn(5, 9, |r, c| ((r + 2 * c) % 4) as f64 * 0.3);
    let (out, cache) = forward(&x, &p).unwrap();
    let g = backward(&p, &cache, &SoftLabel { values: out.probs.clone() }).unwrap();
    assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
}

#[test]
fn depthwise_parameter_count_is_smaller() {
    for layers in 1..=6 {
        let kernels: Vec<usize> = (0..layers).map(|i| 2 * i + 3).collect();
        let arch = Architecture::new(21, 19, 63, kernels.clone());
        let expected: usize = kernels.iter().map(|k| 2 * 21 * k * k + 21).sum::<usize>() + 21 * 21 + 21;
        assert_eq!(arch.param_count(), expected);
        assert!(arch.param_count() < arch.dense_param_count());
    }
}
