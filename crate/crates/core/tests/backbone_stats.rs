mod common;

use std::sync::Arc;

use proptest::prelude::*;
use strip_bbm_core::backbone::{simulate_dressed, simulate_quasistationary, thin_population, BackboneRates};
use strip_bbm_core::bvp::solve_survival_profile;
use strip_bbm_core::model::{ModelParams, OffspringLaw};
use strip_bbm_core::rng::stream;
use strip_bbm_core::sim::{SimConfig, Tag};
use strip_bbm_core::stats::chi_square_gof;

fn rates(params: &ModelParams, factor: f64, n: usize) -> BackboneRates {
    let k = factor * params.critical_width().unwrap();
    BackboneRates::from_profile(Arc::new(solve_survival_profile(params, k, n, 1e-10).unwrap())).unwrap()
}

fn choose(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

#[test]
fn thinning_four_particles_is_binomial() {
    let params = ModelParams::dyadic(0.0, 1.0);
    let r = rates(&params, 1.3, 1000);
    let profile = r.profile();
    let x = 0.5 * profile.width();
    let p = profile.p_at(x);
    let mut counts = vec![0usize; 5];
    for i in 0..100_000 {
        let (kept, mask) = thin_population(&[x; 4], profile, &mut stream(31, 0, i));
        assert_eq!(kept, mask.iter().filter(|b| **b).count());
        counts[kept] += 1;
    }
    let res = chi_square_gof(&counts, &common::binomial_pmf(4, p));
    assert!(!res.significant(0.01), "{res:?}");
}

#[test]
fn dressed_blue_line_waits_an_exponential_time() {
    let params = ModelParams::dyadic(0.0, 1.0);
    let r = rates(&params, 1.3, 1000);
    let x = 0.5 * r.profile().width();
    let beta_d = r.beta_d(x);
    assert!((beta_d - (2.0 - r.profile().p_at(x))).abs() < 1e-12);
    let t = 0.05 / beta_d;
    let runs = 100_000;
    let quiet = (0..runs)
        .filter(|&i| {
            let cfg = SimConfig::new(x, Tag::Blue, t, 0.001, 32);
            simulate_dressed(&r, x, Tag::Blue, &cfg, stream(32, 0, i)).unwrap().created == 1
        })
        .count() as f64
        / runs as f64;
    let exact = (-0.05f64).exp();
    let se = (exact * (1.0 - exact) / runs as f64).sqrt();
    assert!((quiet - exact).abs() < 3.0 * se, "{quiet} vs {exact}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn rate_tables_are_normalized_and_match_direct_sums(s in 0.001f64..0.999) {
        let probs = [0.1, 0.15, 0.3, 0.25, 0.2];
        let law = OffspringLaw::new(probs.iter().copied().enumerate()).unwrap();
        let params = ModelParams::new(0.2, 1.3, law).unwrap();
        let r = rates(&params, 1.4, 400);
        let y = s * r.profile().width();
        let p = r.profile().p_at(y);
        let beta = 1.3;
        let max = probs.len() - 1;

        let q_b = r.q_b(y);
        prop_assert!((q_b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q_b[0] == 0.0 && q_b[1] == 0.0);
        for (k, q) in q_b.iter().enumerate().skip(2) {
            let direct: f64 = (k..=max)
                .map(|n| beta * probs[n] * choose(n, k) * p.powi(k as i32 - 1) * (1.0 - p).powi((n - k) as i32))
                .sum();
            prop_assert!((r.beta_b(y) * q - direct).abs() < 1e-12);
        }

        let q_r = r.q_r(y);
        prop_assert!((q_r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..=max {
            let direct = beta * probs[k] * (1.0 - p).powi(k as i32 - 1);
            prop_assert!((r.beta_r(y) * q_r[k] - direct).abs() < 1e-12);
        }

        for k in 1..max {
            let q_i = r.q_i(k, y);
            prop_assert!((q_i.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for n in 1..max {
            let direct = beta * probs[n + 1] * (n + 1) as f64 * (1.0 - p).powi(n as i32);
            prop_assert!((r.beta_i(n, y) - direct).abs() < 1e-12);
        }

        let g: f64 = probs.iter().enumerate().map(|(k, q)| q * (1.0 - p).powi(k as i32)).sum();
        let beta_d = beta * (1.0 - g) / p;
        prop_assert!((r.beta_d(y) - beta_d).abs() < 1e-9 * beta_d);
        let decomposed = r.beta_b(y) + r.beta_i_total(y) + beta * probs[1];
        prop_assert!((decomposed - beta_d).abs() < 1e-9 * beta_d);
    }
}

#[test]
fn spine_occupation_matches_sine_squared() {
    let params = ModelParams::dyadic(0.0, 1.0);
    let k0 = params.critical_width().unwrap();
    let times: Vec<f64> = (2..=50).map(f64::from).collect();
    let mut samples = Vec::new();
    for i in 0..200 {
        let cfg = SimConfig::new(0.5 * k0, Tag::Spine, 50.0, 0.005, 33).observing(&times).capped(100_000);
        let out = simulate_quasistationary(&params, 0.5 * k0, &cfg, stream(33, 0, i)).unwrap();
        assert!(!out.truncated);
        for snap in &out.snapshots {
            let spines: Vec<f64> = snap.particles.iter().filter(|p| p.tag == Tag::Spine).map(|p| p.x).collect();
            assert_eq!(spines.len(), 1);
            samples.push(spines[0]);
        }
    }
    let bins = 20;
    let probs = common::bin_probs(k0, bins, |x| common::conditioned_cdf(k0, x));
    let res = chi_square_gof(&common::bin_counts(&samples, k0, bins), &probs);
    assert!(!res.significant(0.01), "{res:?}");
}
