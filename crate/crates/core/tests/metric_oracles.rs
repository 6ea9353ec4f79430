//! Metric axioms and MS-SSIM against a per-window reference.

use proptest::prelude::*;
use radiance_core::metrics::{mae, ms_ssim, psnr, psnr_from_mse, rmse, sample_metrics, MetricsReport, PSNR_CAP_DB};
use radiance_oracles::{ms_ssim_direct, ssim_direct};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let (a, b, c) = (
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.0..6.0),
    );
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            0.5 + 0.4 * (a * x * 3.0 + c).sin() * (b * y * 3.0).cos()
        })
        .collect()
}

fn noisy(rng: &mut ChaCha8Rng, x: &[f64], amp: f64) -> Vec<f64> {
    x.iter()
        .map(|v| (v + rng.random_range(-amp..amp)).clamp(0.0, 1.0))
        .collect()
}

#[test]
fn ms_ssim_matches_reference_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10 {
        let (h, w) = (32, 32);
        let x: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        // half unrelated pairs, half correlated ones
        let y = if i % 2 == 0 {
            (0..h * w).map(|_| rng.random()).collect()
        } else {
            noisy(&mut rng, &x, 0.2)
        };
        let got = ms_ssim(&x, &y, h, w).unwrap();
        let want = ms_ssim_direct(&x, &y, h, w);
        assert!((got - want).abs() < 1e-6, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn ms_ssim_matches_reference_at_other_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (h, w) in [(11, 11), (24, 40), (64, 64), (176, 180)] {
        let x = smooth_map(&mut rng, h, w);
        let y = noisy(&mut rng, &x, 0.1);
        let got = ms_ssim(&x, &y, h, w).unwrap();
        let want = ms_ssim_direct(&x, &y, h, w);
        assert!((got - want).abs() < 1e-6, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn single_scale_ssim_orders_by_distortion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = smooth_map(&mut rng, 32, 32);
    let mild = noisy(&mut rng, &x, 0.02);
    let heavy = noisy(&mut rng, &x, 0.3);
    assert!(ssim_direct(&x, &mild, 32, 32).0 > ssim_direct(&x, &heavy, 32, 32).0);
    assert!(ms_ssim(&x, &mild, 32, 32).unwrap() > ms_ssim(&x, &heavy, 32, 32).unwrap());
}

#[test]
fn identity_and_psnr_reference_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let x: Vec<f64> = (0..32 * 32).map(|_| rng.random()).collect();
        assert!((ms_ssim(&x, &x, 32, 32).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
    }
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
    let x = vec![0.5; 64];
    let y = vec![0.6; 64];
    assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn report_means_per_sample_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<_> = (0..4)
        .map(|_| {
            let x = smooth_map(&mut rng, 16, 16);
            let y = noisy(&mut rng, &x, 0.1);
            sample_metrics(&x, &y, 16, 16).unwrap()
        })
        .collect();
    let r = MetricsReport::aggregate(&samples).unwrap();
    let mean = |f: fn(&radiance_core::metrics::SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / 4.0;
    assert!((r.mae - mean(|s| s.mae)).abs() < 1e-15);
    assert!((r.rmse - mean(|s| s.rmse)).abs() < 1e-15);
    assert!((r.psnr_db - mean(|s| s.psnr_db)).abs() < 1e-12);
    assert!((r.ms_ssim - mean(|s| s.ms_ssim)).abs() < 1e-15);
    assert_eq!(r.psnr_capped, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rmse_bounds_mae(x in prop::collection::vec(0.0f64..1.0, 64), y in prop::collection::vec(0.0f64..1.0, 64)) {
        let (a, r) = (mae(&x, &y).unwrap(), rmse(&x, &y).unwrap());
        prop_assert!(r >= a - 1e-15);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn ms_ssim_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..24 * 24).map(|_| rng.random()).collect();
        let y = noisy(&mut rng, &x, 0.4);
        let xy = ms_ssim(&x, &y, 24, 24).unwrap();
        let yx = ms_ssim(&y, &x, 24, 24).unwrap();
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&xy));
    }

    #[test]
    fn psnr_decreases_with_error(m1 in 1e-6f64..1.0, m2 in 1e-6f64..1.0) {
        prop_assume!(m1 < m2);
        prop_assert!(psnr_from_mse(m1, 1.0) > psnr_from_mse(m2, 1.0));
    }
}
