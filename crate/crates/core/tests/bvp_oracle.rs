mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use strip_bbm_core::bvp::{solve_from_guess, solve_survival_profile, BvpError, RatioConvention};
use strip_bbm_core::model::{ModelParams, OffspringLaw};

fn dyadic() -> ModelParams {
    ModelParams::dyadic(0.0, 1.0)
}

fn k0() -> f64 {
    dyadic().critical_width().unwrap()
}

#[test]
fn agrees_with_fixed_point_oracle_at_fine_grid() {
    let params = dyadic();
    let k = 1.3 * k0();
    let oracle = common::picard_profile(0.0, 1.0, &common::dyadic(), k, 16_000, 1e-14);
    let profile = solve_survival_profile(&params, k, 2000, 1e-10).unwrap();
    let oracle_max = oracle.iter().copied().fold(0.0, f64::max);
    assert!((profile.max_p() - oracle_max).abs() < 1e-6, "{} vs {}", profile.max_p(), oracle_max);
    for (x, p) in profile.nodes().iter().zip(&profile.p) {
        assert!((p - common::interp(&oracle, k, *x)).abs() < 1e-6);
    }
}

#[test]
fn agrees_with_shooting_oracle_for_drift_and_general_law() {
    let law = OffspringLaw::new([(0, 0.2), (1, 0.1), (3, 0.7)]).unwrap();
    let probs = [0.2, 0.1, 0.0, 0.7];
    for (mu, beta) in [(0.5, 1.0), (0.3, 2.0)] {
        let params = ModelParams::new(mu, beta, law.clone()).unwrap();
        let k = 1.4 * params.critical_width().unwrap();
        let oracle = common::shooting_profile(mu, beta, &probs, k, 40_000);
        let profile = solve_survival_profile(&params, k, 2000, 1e-10).unwrap();
        let worst = profile
            .nodes()
            .iter()
            .zip(&profile.p)
            .map(|(x, p)| (p - common::interp(&oracle, k, *x)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 2e-6, "mu={mu} beta={beta}: {worst}");
    }
}

#[test]
fn second_order_grid_convergence() {
    let params = ModelParams::dyadic(0.4, 1.0);
    let k = 1.3 * params.critical_width().unwrap();
    let oracle = common::shooting_profile(0.4, 1.0, &common::dyadic(), k, 64_000);
    let errors: Vec<f64> = [100, 200, 400]
        .iter()
        .map(|&n| {
            let profile = solve_survival_profile(&params, k, n, 1e-12).unwrap();
            let h = profile.spacing();
            let e = profile
                .nodes()
                .iter()
                .zip(&profile.p)
                .map(|(x, p)| (p - common::interp(&oracle, k, *x)).abs())
                .fold(0.0, f64::max);
            e / (h * h)
        })
        .collect();
    // The error constant e/h² is about 0.105 and stays put under refinement.
    for c in &errors {
        assert!(*c > 0.09 && *c < 0.12, "{errors:?}");
    }
    assert!((errors[2] / errors[0] - 1.0).abs() < 0.01, "{errors:?}");
}

#[test]
fn monotone_in_width_after_rescaling() {
    let params = dyadic();
    let profiles: Vec<_> = [1.1, 1.3, 1.6]
        .iter()
        .map(|f| solve_survival_profile(&params, f * k0(), 1000, 1e-10).unwrap())
        .collect();
    for pair in profiles.windows(2) {
        for j in 1..100 {
            let s = j as f64 / 100.0;
            assert!(pair[0].p_at(s * pair[0].width()) <= pair[1].p_at(s * pair[1].width()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10, ..ProptestConfig::default() })]

    #[test]
    fn newton_from_random_interior_guesses_finds_the_same_branch(
        amps in proptest::collection::vec(0.0f64..0.3, 4),
        scale in 0.05f64..0.95,
    ) {
        let params = dyadic();
        let k = 1.3 * k0();
        let n = 400;
        let reference = solve_survival_profile(&params, k, n, 1e-12).unwrap();
        let guess: Vec<f64> = (0..n + 2)
            .map(|i| {
                let x = PI * i as f64 / (n + 1) as f64;
                let bumps: f64 = amps.iter().enumerate().map(|(j, a)| a * ((2 * j + 3) as f64 * x).sin()).sum();
                (scale * x.sin() + bumps * x.sin()).clamp(1e-3, 0.999)
            })
            .collect();
        match solve_from_guess(&params, k, &guess, 1e-12) {
            Ok(profile) if !profile.is_trivial() && profile.p[1..=n].iter().all(|&v| v > 0.0) => {
                let diff = profile.p.iter().zip(&reference.p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(diff < 1e-8, "diff {diff}");
            }
            Ok(profile) => prop_assert!(profile.max_p() < 1e-8 || profile.p.iter().any(|&v| v < 0.0)),
            Err(BvpError::NonConvergence { .. } | BvpError::SignChangingBranch { .. } | BvpError::TrivialBranch { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn fstar_normalized_bounded_and_solves_its_eigen_equation() {
    let params = dyadic();
    let k = 1.3 * k0();
    let mut residual_constants = Vec::new();
    let mut maxima = Vec::new();
    for n in [500, 1000] {
        let profile = solve_survival_profile(&params, k, n, 1e-12).unwrap();
        let f = profile.eigenfunction_fstar().unwrap();
        let blue = profile.invariant_density_blue().unwrap();
        let h = profile.spacing();
        let weighted: Vec<f64> = f.values.iter().zip(&blue.values).map(|(a, w)| a * a * w).collect();
        let norm: f64 = weighted.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
        assert!((norm - 1.0).abs() < 1e-5);
        residual_constants.push(profile.eigen_residual(&f) / (h * h));
        maxima.push(f.max());
    }
    assert!(residual_constants.iter().all(|c| c.is_finite() && *c < 50.0), "{residual_constants:?}");
    assert!((maxima[1] / maxima[0] - 1.0).abs() < 0.05, "{maxima:?}");
}

#[test]
fn blue_density_approaches_conditioned_density_near_criticality() {
    let params = dyadic();
    let distance = |eps: f64| {
        let k = k0() / (1.0 - eps);
        let profile = solve_survival_profile(&params, k, 2000, 1e-11).unwrap();
        let (blue, _) = profile.invariant_densities().unwrap();
        (1..200)
            .map(|j| {
                let s = j as f64 / 200.0;
                let rescaled = blue.at(s * k) * k / k0();
                (rescaled - 2.0 / k0() * (PI * s).sin().powi(2)).abs()
            })
            .fold(0.0, f64::max)
    };
    assert!(distance(0.02) <= distance(0.10));
}

#[test]
fn fprime_blue_is_first_order_in_p_near_criticality() {
    let params = dyadic();
    let profile = solve_survival_profile(&params, k0() / 0.98, 4000, 1e-11).unwrap();
    let x = 0.5 * profile.width();
    let ratio = profile.fprime_blue_at(x) / profile.p_at(x);
    assert!((0.9..=1.1).contains(&ratio), "{ratio}");
}

#[test]
fn lambda_bounds_sandwich_and_tighten() {
    let params = dyadic();
    let mut gaps = Vec::new();
    for eps in [0.10, 0.02] {
        let k = k0() / (1.0 - eps);
        let profile = solve_survival_profile(&params, k, 4000, 1e-11).unwrap();
        let lambda = params.lambda_rate(k).unwrap();
        let b = profile.lambda_bounds();
        assert!(b.lower - lambda <= 1e-6 && lambda - b.upper <= 1e-6, "{b:?} vs {lambda}");
        gaps.push((b.upper - b.lower) / lambda);
    }
    assert!(gaps[1] < gaps[0], "{gaps:?}");
    let trivial = solve_survival_profile(&params, 0.9 * k0(), 200, 1e-10).unwrap();
    let b = trivial.lambda_bounds();
    assert_eq!((b.lower, b.upper), (0.0, 0.0));
}

#[test]
fn integral_identity_residual_is_discretization_sized() {
    for mu in [0.0, 0.5] {
        let params = ModelParams::dyadic(mu, 1.0);
        let k = 1.3 * params.critical_width().unwrap();
        let tol = 1e-10;
        let profile = solve_survival_profile(&params, k, 1000, tol).unwrap();
        let h = profile.spacing();
        let r = profile.integral_identity_residual();
        assert!(r <= 10.0 * (tol + h * h), "mu={mu}: {r}");
    }
    let trivial = solve_survival_profile(&dyadic(), 0.9 * k0(), 200, 1e-10).unwrap();
    assert_eq!(trivial.integral_identity_residual(), 0.0);
}

#[test]
fn asymptotic_ratio_moves_toward_one() {
    let params = dyadic();
    let mids: Vec<f64> = [0.10, 0.02]
        .iter()
        .map(|eps| {
            let profile = solve_survival_profile(&params, k0() / (1.0 - eps), 4000, 1e-11).unwrap();
            profile.asymptotic_ratio_midpoint(RatioConvention::Relative).unwrap()
        })
        .collect();
    assert!((0.7..=1.3).contains(&mids[0]));
    assert!((mids[1] - 1.0).abs() < (mids[0] - 1.0).abs(), "{mids:?}");
    let trivial = solve_survival_profile(&params, 0.9 * k0(), 200, 1e-10).unwrap();
    assert!(matches!(trivial.asymptotic_ratio(RatioConvention::Relative), Err(BvpError::TrivialProfile)));
}
