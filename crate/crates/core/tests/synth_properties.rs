use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cista_core::dataset::{generate_dataset, generate_samples, read_dataset, GenerateOptions};
use cista_core::lightfield::{central_view, detect_lateral, extract_epi};
use cista_core::synth::{make_soft_label, render_epi, render_lightfield, OpticsConfig, Source};
use cista_core::Matrix2;

fn desk() -> OpticsConfig {
    OpticsConfig {
        theta_u: 9,
        theta_v: 9,
        n_x: 31,
        n_y: 31,
        kappa: 0.1,
        psf_sigma: 1.0,
        depth_min: -10.0,
        depth_max: 10.0,
        depth_count: 21,
    }
}

fn source(cfg: &OpticsConfig, rng: &mut ChaCha8Rng) -> Source {
    let (lo, hi) = cfg.valid_x_band();
    let (ylo, yhi) = cfg.valid_y_band();
    Source {
        x0: rng.random_range(lo..=hi),
        y0: rng.random_range(ylo..=yhi),
        z: cfg.depth_at(rng.random_range(0..cfg.depth_count)),
        amplitude: rng.random_range(0.5..2.0),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rendering_is_linear_in_amplitude(seed in any::<u64>()) {
        let cfg = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = source(&cfg, &mut rng);
        let doubled = Source { amplitude: 2.0 * s.amplitude, ..s };
        let a = render_epi(&[s], &cfg, 0.0, 0).unwrap();
        let b = render_epi(&[doubled], &cfg, 0.0, 0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((2.0 * u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn lightfield_row_reproduces_the_epi(seed in any::<u64>()) {
        let cfg = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Source { y0: rng.random_range(8..=22) as f64, ..source(&cfg, &mut rng) };
        let lf = render_lightfield(&[s], &cfg, 0.0, 0).unwrap();
        let row = extract_epi(&lf, s.y0 as usize, (cfg.theta_v - 1) / 2).unwrap();
        let epi = render_epi(&[s], &cfg, 0.0, 0).unwrap();
        for (u, v) in row.data().iter().zip(epi.data()) {
            prop_assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn central_view_peaks_at_the_source(seed in any::<u64>()) {
        let cfg = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = source(&cfg, &mut rng);
        let view = central_view(&render_lightfield(&[s], &cfg, 0.0, 0).unwrap()).unwrap();
        let det = detect_lateral(&view, 0.5 * view.max(), 3);
        prop_assert_eq!(det.len(), 1);
        prop_assert_eq!((det[0].x, det[0].y), (s.x0.round() as usize, s.y0.round() as usize));
    }

    #[test]
    fn lateral_detections_are_sorted_separated_peaks(
        seed in any::<u64>(), rel in 0.0f64..0.9, sep in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view = Matrix2::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0));
        let threshold = rel * view.max();
        let det = detect_lateral(&view, threshold, sep);
        for w in det.windows(2) {
            prop_assert!(w[0].intensity >= w[1].intensity);
        }
        for (i, a) in det.iter().enumerate() {
            prop_assert!(a.intensity > threshold);
            prop_assert_eq!(view[(a.x, a.y)], a.intensity);
            for nx in a.x.saturating_sub(1)..=(a.x + 1).min(15) {
                for ny in a.y.saturating_sub(1)..=(a.y + 1).min(15) {
                    prop_assert!(view[(nx, ny)] <= a.intensity);
                }
            }
            for b in &det[i + 1..] {
                prop_assert!(a.x.abs_diff(b.x).max(a.y.abs_diff(b.y)) >= sep);
            }
        }
    }

    #[test]
    fn soft_labels_stay_in_unit_interval(
        idx in proptest::collection::vec(0usize..21, 0..4), sigma in 0.0f64..4.0,
    ) {
        let label = make_soft_label(&idx, sigma, 21).unwrap();
        prop_assert!(label.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for &i in &idx {
            prop_assert_eq!(label.values[i], 1.0);
        }
        prop_assert_eq!(idx.is_empty(), label.values.iter().all(|&v| v == 0.0));
        if idx.len() == 1 {
            let i = idx[0];
            for d in 1..21 {
                if i >= d && i + d < 21 {
                    prop_assert_eq!(label.values[i - d], label.values[i + d]);
                }
            }
        }
    }
}

#[test]
fn sample_depends_only_on_seed_and_index() {
    let cfg = desk();
    let short = GenerateOptions {
        count: 10,
        seed: 3,
        ..Default::default()
    };
    let long = GenerateOptions { count: 25, ..short.clone() };
    let a = generate_samples(&cfg, &short).unwrap();
    let b = generate_samples(&cfg, &long).unwrap();
    assert_eq!(a[..], b[..10]);
    let other = generate_samples(&cfg, &GenerateOptions { seed: 4, ..short }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn depth_histogram_is_uniform() {
    let cfg = desk();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hist.bin");
    let opts = GenerateOptions {
        count: 1000,
        sources_min: 1,
        sources_max: 1,
        seed: 17,
        ..Default::default()
    };
    generate_dataset(&cfg, &opts, &path).unwrap();
    let (header, samples) = read_dataset(&path).unwrap();
    assert_eq!(header.count, 1000);
    let mut counts = vec![0usize; cfg.depth_count];
    for s in &samples {
        assert_eq!(s.sources.len(), 1);
        counts[cfg.depth_index(s.sources[0].z)] += 1;
    }
    let expected = 1000.0 / cfg.depth_count as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 20 degrees of freedom: mean 20, standard deviation sqrt(40).
    assert!(chi2 < 20.0 + 3.0 * 40f64.sqrt(), "chi-square {chi2}, counts {counts:?}");
}
