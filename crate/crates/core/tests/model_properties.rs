mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use strip_bbm_core::model::{map_csbp_mechanism, CsbpMechanism, ModelParams, OffspringLaw};

fn law_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, 2..7).prop_filter_map("needs mass above one child", |w| {
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / total).collect();
        let mean: f64 = probs.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
        (total > 1e-3 && mean > 1.05).then_some(probs)
    })
}

fn law_from(probs: &[f64]) -> OffspringLaw {
    OffspringLaw::new(probs.iter().copied().enumerate()).unwrap()
}

proptest! {
    #[test]
    fn size_biased_law_is_normalized_with_direct_mean(probs in law_strategy()) {
        let law = law_from(&probs);
        let biased = law.size_biased().unwrap();
        let total: f64 = biased.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let m: f64 = probs.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
        let fact2: f64 = probs.iter().enumerate().map(|(k, q)| (k * k.saturating_sub(1)) as f64 * q).sum();
        prop_assert!((biased.mean() - fact2 / m).abs() < 1e-12);
    }

    #[test]
    fn mechanism_is_convex_and_matches_direct_sum(
        probs in law_strategy(),
        beta in 0.1f64..5.0,
        mut s in proptest::collection::vec(0.0f64..=1.0, 3),
    ) {
        let params = ModelParams::new(0.0, beta, law_from(&probs)).unwrap();
        s.sort_by(f64::total_cmp);
        let (a, b, c) = (s[0], s[1], s[2]);
        let f = |v: f64| params.branching_mechanism(v).unwrap();
        prop_assert!((f(b) - common::mechanism(beta, &probs, b)).abs() < 1e-12);
        if c - a > 1e-9 {
            let chord = f(a) + (f(c) - f(a)) * (b - a) / (c - a);
            prop_assert!(f(b) <= chord + 1e-12);
        }
        prop_assert!(f(1.0).abs() < 1e-14);
        let m: f64 = probs.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
        prop_assert!((common::mechanism_derivative(beta, &probs, 1.0) - (m - 1.0) * beta).abs() < 1e-12);
        prop_assert!(params.branching_mechanism(1.0 + 1e-9).is_err());
    }

    #[test]
    fn critical_width_formula(probs in law_strategy(), beta in 0.1f64..5.0, mu in 0.0f64..3.0) {
        let params = ModelParams::new(mu, beta, law_from(&probs)).unwrap();
        let m: f64 = probs.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
        let margin = 2.0 * (m - 1.0) * beta - mu * mu;
        match params.critical_width() {
            Some(k0) => {
                prop_assert!(margin > 0.0);
                prop_assert!((k0 - PI / margin.sqrt()).abs() <= 1e-12 * k0);
                prop_assert!(params.lambda_rate(k0).unwrap().abs() < 1e-12);
            }
            None => prop_assert!(margin <= 0.0),
        }
    }

    #[test]
    fn csbp_quadratic_round_trip(alpha in 0.05f64..5.0, b in 0.05f64..5.0) {
        let mapped = map_csbp_mechanism(&CsbpMechanism::quadratic(alpha, b)).unwrap();
        prop_assert!((mapped.lambda_star - alpha / b).abs() <= 1e-10 * mapped.lambda_star);
        let dyadic = ModelParams::dyadic(0.0, alpha);
        for i in 0..100 {
            let s = i as f64 / 99.0;
            prop_assert!((mapped.eval(s) - dyadic.branching_mechanism(s).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn lambda_is_strictly_increasing_and_vanishes_at_k0() {
    let params = ModelParams::new(0.3, 1.5, OffspringLaw::new([(0, 0.1), (2, 0.6), (3, 0.3)]).unwrap()).unwrap();
    let k0 = params.critical_width().unwrap();
    assert!(params.lambda_rate(k0).unwrap().abs() < 1e-12);
    let values: Vec<f64> = (1..=100).map(|i| params.lambda_rate(0.05 * i as f64 * k0).unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn asymptotic_constant_doubles_with_distance_to_k0() {
    for mu in [0.0, 0.7] {
        let params = ModelParams::dyadic(mu, 1.0);
        let k0 = params.critical_width().unwrap();
        let eps = 0.013;
        let one = params.asymptotic_constant(k0 + eps).unwrap();
        let two = params.asymptotic_constant(k0 + 2.0 * eps).unwrap();
        assert!((two - 2.0 * one).abs() <= 1e-12 * two.abs());
    }
}
