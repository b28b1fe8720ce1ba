use std::sync::Arc;

use proptest::prelude::*;

use fedchain::model::{LayerLayout, ParameterVector};
use fedchain::personalization::PersonalizationMask;
use fedchain::privacy::*;
use fedchain::rng::{stream, Purpose};

mod support;
use support::*;

fn vector(values: Vec<f64>) -> ParameterVector {
    let layout = Arc::new(LayerLayout::from_sizes([("all", values.len())]).unwrap());
    ParameterVector::new(values, layout).unwrap()
}

#[test]
fn gaussian_sigma_matches_high_precision_value() {
    // sqrt(2 ln(1.25e5)) evaluated at 40 digits
    let expected = 4.844_805_262_605_389;
    assert!((gaussian_sigma(1.0, 1.0, 1e-5).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn alpha_grid_matches_documented_orders() {
    assert_eq!(default_alpha_grid(), oracle_alphas());
}

#[test]
fn single_release_conversion_matches_brute_force() {
    let mut state = AccountantState::default();
    state.compose_gaussian(1.0, 1).unwrap();
    let (eps, alpha) = rdp_to_dp(&state, 1e-5).unwrap();
    assert!((eps - oracle_epsilon(1.0, 1, 1e-5)).abs() <= 1e-9);
    assert!(alpha > 1.0);
}

#[test]
fn epsilon_grows_with_releases_and_shrinking_delta() {
    let mut prev = 0.0;
    for t in 1..=40 {
        let eps = epsilon_after(1.1, t, 1e-5).unwrap();
        assert!(eps > prev);
        prev = eps;
    }
    let mut prev = 0.0;
    for delta in [0.5, 0.1, 1e-2, 1e-4, 1e-6, 1e-9] {
        let eps = epsilon_after(1.1, 10, delta).unwrap();
        assert!(eps > prev);
        prev = eps;
    }
}

#[test]
fn rdp_monotone_over_grid() {
    for &z in &[0.5, 1.0, 2.0, 4.0] {
        let curve: Vec<f64> = oracle_alphas()
            .iter()
            .map(|&a| rdp_of_gaussian(z, a).unwrap())
            .collect();
        assert!(curve.windows(2).all(|w| w[0] < w[1]));
    }
    for &a in &[1.5, 2.0, 32.0] {
        let curve: Vec<f64> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&z| rdp_of_gaussian(z, a).unwrap())
            .collect();
        assert!(curve.windows(2).all(|w| w[0] > w[1]));
    }
}

#[test]
fn calibration_single_round_is_grid_minimal() {
    let spec = PrivacySpec {
        epsilon_target: 1.0,
        delta: 1e-5,
        clip_c: 1.0,
        noise_split_rho: 1.0,
        rounds: 1,
    };
    let cal = calibrate_noise(&spec).unwrap();
    assert!(oracle_epsilon(cal.z, 1, 1e-5) <= 1.0);
    let grid = noise_multiplier_grid();
    let pos = grid.iter().position(|&z| z == cal.z).unwrap();
    assert!(pos > 0);
    assert!(oracle_epsilon(grid[pos - 1], 1, 1e-5) > 1.0);
    assert_eq!(cal.sigma_u, cal.sigma_v);
}

#[test]
fn adaptive_noise_routes_and_scales() {
    let d = 200_000;
    let half = d / 2;
    let layout = Arc::new(LayerLayout::from_sizes([("personal", half), ("shared", half)]).unwrap());
    let mask = PersonalizationMask::from_layers(layout.clone(), &[true, false], 0.5).unwrap();
    let base = ParameterVector::new((0..d).map(|i| (i % 7) as f64 * 0.1).collect(), layout).unwrap();

    let only_shared = adaptive_noise(&base, &mask, 0.0, 2.0, stream(5, Purpose::Test, 0, 0)).unwrap();
    assert_eq!(&only_shared.values()[..half], &base.values()[..half]);
    assert_ne!(&only_shared.values()[half..], &base.values()[half..]);

    let noisy = adaptive_noise(&base, &mask, 1.0, 3.0, stream(6, Purpose::Test, 0, 0)).unwrap();
    let noise: Vec<f64> = noisy.values().iter().zip(base.values()).map(|(a, b)| a - b).collect();
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let (u, v) = noise.split_at(half);
    assert!((var(u) / 1.0 - 1.0).abs() <= 0.05, "{}", var(u));
    assert!((var(v) / 9.0 - 1.0).abs() <= 0.05, "{}", var(v));

    let mu = u.iter().sum::<f64>() / half as f64;
    let mv = v.iter().sum::<f64>() / half as f64;
    let cov: f64 = u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum::<f64>() / (half - 1) as f64;
    let r = cov / (var(u) * var(v)).sqrt();
    assert!(r.abs() <= 0.01, "cross-correlation {r}");
}

#[test]
fn adaptive_noise_is_deterministic_per_stream() {
    let v = vector(vec![0.5; 64]);
    let m = PersonalizationMask::all_shared(v.layout().clone());
    let a = adaptive_noise(&v, &m, 0.1, 0.2, stream(9, Purpose::UpdateNoise, 1, 2)).unwrap();
    let b = adaptive_noise(&v, &m, 0.1, 0.2, stream(9, Purpose::UpdateNoise, 1, 2)).unwrap();
    let c = adaptive_noise(&v, &m, 0.1, 0.2, stream(9, Purpose::UpdateNoise, 2, 2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_is_bounded(values in prop::collection::vec(-100.0f64..100.0, 1..300), c in 0.01f64..50.0) {
        let v = vector(values);
        let out = clip_update(&v, c).unwrap();
        prop_assert!(out.l2_norm() <= c + 1e-12);
        if v.l2_norm() <= c {
            prop_assert_eq!(out, v);
        }
    }

    #[test]
    fn conversion_matches_brute_force(z in 0.3f64..20.0, t in 1u64..200, log_delta in -12.0f64..-0.5) {
        let delta = 10f64.powf(log_delta);
        let mut state = AccountantState::default();
        state.compose_gaussian(z, t).unwrap();
        let (eps, _) = rdp_to_dp(&state, delta).unwrap();
        prop_assert!((eps - oracle_epsilon(z, t, delta)).abs() <= 1e-9);
    }

    #[test]
    fn composition_is_additive(z in 0.3f64..20.0, t in 1u64..100) {
        let mut once = AccountantState::default();
        once.compose_gaussian(z, 1).unwrap();
        let mut many = AccountantState::default();
        for _ in 0..t {
            many.compose_gaussian(z, 1).unwrap();
        }
        for (a, b) in once.accumulated_rdp().iter().zip(many.accumulated_rdp()) {
            prop_assert_eq!(t as f64 * a, b);
        }
    }

    #[test]
    fn calibration_respects_budget_and_is_monotone(eps in 0.5f64..16.0, rounds in 1u32..40, rho in 1.0f64..4.0) {
        let spec = PrivacySpec { epsilon_target: eps, delta: 1e-5, clip_c: 0.7, noise_split_rho: rho, rounds };
        let cal = calibrate_noise(&spec).unwrap();
        prop_assert!(epsilon_after(cal.z, rounds as u64, 1e-5).unwrap() <= eps);
        prop_assert!((cal.sigma_v / cal.sigma_u - rho).abs() <= 1e-15 * rho);
        match calibrate_noise(&PrivacySpec { rounds: rounds * 2, ..spec }) {
            Ok(doubled) => prop_assert!(doubled.z >= cal.z),
            Err(e) => prop_assert!(matches!(e, fedchain::Error::InfeasibleBudget { .. }), "{e}"),
        }
    }
}
