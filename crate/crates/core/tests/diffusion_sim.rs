mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use strip_bbm_core::bvp::solve_survival_profile;
use strip_bbm_core::diffusion::{sample_occupation, sample_positions, Advance, MotionSpec};
use strip_bbm_core::model::{ModelParams, OffspringLaw};
use strip_bbm_core::rng::{normal, stream, SimRng};
use strip_bbm_core::sim::{
    estimate_survival, growth_rate_estimate, run_branching, run_replicates, stopping_line_count, ConstantBranching, DeathCause,
    Dynamics, EventKind, EventLog, SimConfig, SimError, Tag,
};
use strip_bbm_core::stats::{chi_square_gof, ks_test, mean_stderr};

fn dyadic(mu: f64) -> ModelParams {
    ModelParams::dyadic(mu, 1.0)
}

fn positions_from(motion: &MotionSpec, seed: u64, paths: usize, horizon: f64, dt: f64) -> Vec<f64> {
    (0..paths as u64)
        .flat_map(|i| {
            let mut rng = stream(seed, 1, i);
            let v = sample_positions(motion, 0.5 * motion.width(), horizon, 1.0, dt, &mut rng).unwrap();
            v.into_iter().skip(2)
        })
        .collect()
}

#[test]
fn conditioned_occupation_matches_sine_squared_for_both_drifts() {
    let k = 1.0;
    let bins = 20;
    let probs = common::bin_probs(k, bins, |x| common::conditioned_cdf(k, x));
    for mu in [0.0, 1.0] {
        let motion = MotionSpec::conditioned(dyadic(mu), k).unwrap();
        let samples = positions_from(&motion, 3, 100, 102.0, 1e-4);
        let r = chi_square_gof(&common::bin_counts(&samples, k, bins), &probs);
        assert!(!r.significant(0.01), "mu={mu}: {r:?}");

        let mut rng = stream(4, 0, mu as u64);
        let hist = sample_occupation(&motion, 0.5, 1e3, bins, 1e-4, &mut rng).unwrap();
        let tv: f64 = hist.fractions.iter().zip(&probs).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.05, "mu={mu}: tv {tv}");
    }
}

#[test]
fn conditioned_stationary_density_from_drift_is_drift_free() {
    // Stationary density of 1/2 d² + b d is proportional to exp(2 int b).
    let k = 2.0;
    let n = 4000;
    for mu in [0.0, 1.0, 3.0] {
        let motion = MotionSpec::conditioned(dyadic(mu), k).unwrap();
        let h = k / n as f64;
        let mut log_density = vec![0.0; n + 1];
        let mid = n / 2;
        for i in mid + 1..n {
            let (a, b) = ((i - 1) as f64 * h, i as f64 * h);
            log_density[i] = log_density[i - 1] + h * (motion.drift(a) + motion.drift(b));
        }
        for i in (1..mid).rev() {
            let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
            log_density[i] = log_density[i + 1] - h * (motion.drift(a) + motion.drift(b));
        }
        for i in (n / 10..9 * n / 10).step_by(37) {
            let x = i as f64 * h;
            let expected = (PI * x / k).sin().powi(2);
            assert!((log_density[i].exp() - expected).abs() < 1e-5, "mu={mu} x={x}");
        }
    }
}

#[test]
fn blue_occupation_near_criticality_matches_blue_density() {
    let params = dyadic(0.0);
    let k = params.critical_width().unwrap() / 0.95;
    let profile = Arc::new(solve_survival_profile(&params, k, 2000, 1e-10).unwrap());
    let blue = profile.invariant_density_blue().unwrap();
    let motion = MotionSpec::blue(profile.clone()).unwrap();
    let bins = 20;
    let samples = positions_from(&motion, 5, 100, 52.0, 1e-3);
    let counts = common::bin_counts(&samples, k, bins);
    let cdf = |x: f64| {
        let m = 400;
        let h = x / m as f64;
        (0..m).map(|j| blue.at((j as f64 + 0.5) * h)).sum::<f64>() * h
    };
    let probs = common::bin_probs(k, bins, cdf);
    let total = samples.len() as f64;
    let tv: f64 = counts.iter().zip(&probs).map(|(c, p)| (*c as f64 / total - p).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.1, "tv {tv}");
}

fn naive_euler_survival(mu: f64, k: f64, x0: f64, t: f64, dt: f64, rng: &mut SimRng) -> bool {
    let mut x = x0;
    let steps = (t / dt).round() as usize;
    for _ in 0..steps {
        x += -mu * dt + dt.sqrt() * normal(rng);
        if x <= 0.0 || x >= k {
            return false;
        }
    }
    true
}

#[test]
fn bridge_correction_removes_discretization_bias() {
    let (mu, k, x0, t) = (0.5, 1.0, 0.5, 0.5);
    let exact = common::killed_survival(mu, k, x0, t, 60);
    let motion = MotionSpec::killed(dyadic(mu), k).unwrap();
    let runs = 100_000;
    let estimate = |dt: f64, seed: u64| {
        let alive = (0..runs)
            .filter(|&i| {
                let mut rng = stream(seed, 7, i);
                matches!(motion.advance(x0, t, dt, &mut rng).unwrap(), Advance::Alive(_))
            })
            .count();
        let p = alive as f64 / runs as f64;
        (p, (p * (1.0 - p) / runs as f64).sqrt())
    };
    let (coarse, se_c) = estimate(0.05, 1);
    let (fine, se_f) = estimate(0.025, 2);
    assert!((coarse - exact).abs() < 3.0 * se_c, "{coarse} vs {exact}");
    assert!((fine - exact).abs() < 3.0 * se_f, "{fine} vs {exact}");
    assert!((coarse - fine).abs() < 3.0 * (se_c * se_c + se_f * se_f).sqrt());
    let naive = (0..runs).filter(|&i| naive_euler_survival(mu, k, x0, t, 0.05, &mut stream(3, 7, i))).count() as f64 / runs as f64;
    assert!(naive - exact > 5.0 * se_c, "naive {naive} exact {exact}");
}

#[test]
fn conditioned_motion_never_leaves_over_ten_million_steps() {
    let motion = MotionSpec::conditioned(dyadic(0.0), 1.0).unwrap();
    let mut rng = stream(8, 0, 0);
    let mut steps = 0usize;
    let mut x = 0.5;
    while steps < 10_000_000 {
        match motion
            .advance_with(x, 100.0, 1e-4, &mut rng, |_, _, _| steps += 1)
            .expect("conditioned motion must not reach the boundary")
        {
            Advance::Alive(next) => x = next,
            Advance::Killed { .. } => panic!("conditioned motion was killed"),
        }
    }
}

#[test]
fn red_motion_is_absorbed() {
    let params = dyadic(0.0);
    let k = params.critical_width().unwrap() / 0.95;
    let profile = Arc::new(solve_survival_profile(&params, k, 2000, 1e-10).unwrap());
    let motion = MotionSpec::red(profile).unwrap();
    let runs = 2000;
    let absorbed = (0..runs)
        .filter(|&i| matches!(motion.advance(0.5 * k, 100.0, 0.01, &mut stream(9, 0, i)).unwrap(), Advance::Killed { .. }))
        .count();
    assert!(absorbed as f64 / runs as f64 > 0.99);
}

#[test]
fn conditioned_drift_blows_up_like_inverse_distance() {
    let k = 1.7;
    let motion = MotionSpec::conditioned(dyadic(0.3), k).unwrap();
    let x = 1e-4 * k;
    assert!((motion.drift(x) * x - 1.0).abs() < 0.05);
    assert!((motion.drift(k - x) * x + 1.0).abs() < 0.05);
}

fn pure_motion(params: &ModelParams, k: f64) -> Dynamics {
    let rule = ConstantBranching { beta: 0.0, law: params.offspring.clone() };
    Dynamics::new(Arc::new(rule)).with_motion(Tag::Plain, MotionSpec::killed(params.clone(), k).unwrap())
}

#[test]
fn no_branching_run_matches_killed_diffusion_series() {
    let params = dyadic(0.3);
    let (k, x0, t) = (1.5, 0.6, 0.4);
    let cfg = SimConfig::new(x0, Tag::Plain, t, 0.01, 21).observing(&[t]);
    let alive: Vec<bool> = run_replicates(&cfg, &pure_motion(&params, k), "beta-zero", 100_000, |_, out| out.alive > 0).unwrap();
    let p = alive.iter().filter(|a| **a).count() as f64 / alive.len() as f64;
    let se = (p * (1.0 - p) / alive.len() as f64).sqrt();
    let exact = common::killed_survival(0.3, k, x0, t, 60);
    assert!((p - exact).abs() < 3.0 * se, "{p} vs {exact}");
}

#[test]
fn strongly_subcritical_width_goes_extinct() {
    let params = dyadic(0.0);
    let k = 0.5 * params.critical_width().unwrap();
    let cfg = SimConfig::new(0.5 * k, Tag::Plain, 20.0, 0.01, 22);
    let est = estimate_survival(&cfg, &Dynamics::plain(&params, k).unwrap(), 10_000).unwrap();
    assert!(est.at_horizon.estimate <= 0.001);
}

#[test]
fn first_branch_probability_over_a_short_window() {
    let params = dyadic(0.0);
    let k = 100.0;
    let horizon = 0.01;
    let cfg = SimConfig::new(50.0, Tag::Plain, horizon, 0.001, 23);
    let branched: Vec<bool> =
        run_replicates(&cfg, &Dynamics::plain(&params, k).unwrap(), "short", 100_000, |_, out| out.created > 1).unwrap();
    let n = branched.len() as f64;
    let p = branched.iter().filter(|b| **b).count() as f64 / n;
    let exact = 1.0 - (-horizon).exp();
    assert!((p - exact).abs() < 3.0 * (exact * (1.0 - exact) / n).sqrt(), "{p} vs {exact}");
}

#[test]
fn survival_is_smaller_near_the_edge() {
    let params = dyadic(0.0);
    let k = 1.3 * params.critical_width().unwrap();
    let dynamics = Dynamics::plain(&params, k).unwrap();
    let edge = estimate_survival(&SimConfig::new(0.01 * k, Tag::Plain, 20.0, 0.01, 24).capped(200), &dynamics, 2000).unwrap();
    let mid = estimate_survival(&SimConfig::new(0.5 * k, Tag::Plain, 20.0, 0.01, 24).capped(200), &dynamics, 2000).unwrap();
    assert!(edge.at_horizon.estimate < mid.at_horizon.estimate);
}

#[test]
fn stopping_line_mean_vanishes_near_zero() {
    let params = dyadic(0.0);
    let k0 = params.critical_width().unwrap();
    let (x, y) = (0.02 * k0, 0.8 * k0);
    let counts: Vec<f64> =
        (0..10_000).map(|i| stopping_line_count(&params, y, x, 0.005, stream(25, 0, i)).unwrap() as f64).collect();
    let est = mean_stderr(&counts);
    let target = (PI * 0.02).sin() / (PI * 0.8).sin();
    assert!((est.mean - target).abs() < 3.0 * est.stderr, "{} vs {target}", est.mean);
    assert!(est.mean < 0.2);
}

#[test]
fn wide_strip_grows_at_the_free_rate() {
    let params = dyadic(0.0);
    let k = 5.0 * params.critical_width().unwrap();
    let cfg = SimConfig::new(0.5 * k, Tag::Plain, 8.0, 0.01, 26);
    let est = growth_rate_estimate(&cfg, &Dynamics::plain(&params, k).unwrap(), 100, 9).unwrap();
    assert!((est.slope - 1.0).abs() < 0.1, "{est:?}");
    let narrow = 0.9 * params.critical_width().unwrap();
    let err = growth_rate_estimate(
        &SimConfig::new(0.5 * narrow, Tag::Plain, 30.0, 0.01, 26),
        &Dynamics::plain(&params, narrow).unwrap(),
        50,
        5,
    )
    .unwrap_err();
    assert!(matches!(err, SimError::AllExtinct(50)));
}

#[test]
fn mean_population_without_killing_is_exponential() {
    let params = dyadic(0.0);
    let cfg = SimConfig::new(500.0, Tag::Plain, 2.0, 0.05, 27).observing(&[1.0, 2.0]);
    let dynamics = Dynamics::plain(&params, 1000.0).unwrap();
    let counts: Vec<[f64; 2]> = run_replicates(&cfg, &dynamics, "many-to-one", 10_000, |_, out| {
        [out.snapshots[0].count() as f64, out.snapshots[1].count() as f64]
    })
    .unwrap();
    for (j, t) in [1.0f64, 2.0].iter().enumerate() {
        let v: Vec<f64> = counts.iter().map(|c| c[j]).collect();
        let est = mean_stderr(&v);
        assert!((est.mean - t.exp()).abs() < 3.0 * est.stderr, "t={t}: {est:?}");
    }
}

#[test]
fn branch_times_are_exponential() {
    let beta = 1.7;
    let params = ModelParams::dyadic(0.0, beta);
    let dynamics = Dynamics::plain(&params, 1e6).unwrap();
    let cfg = SimConfig::new(5e5, Tag::Plain, 40.0, 1.0, 28).recording().capped(1);
    let times: Vec<f64> = run_replicates(&cfg, &dynamics, "clock", 100_000, |_, out| {
        out.log
            .events
            .iter()
            .find(|e| e.id == 0 && matches!(e.kind, EventKind::Death { .. }))
            .map(|e| e.time)
            .unwrap_or(f64::INFINITY)
    })
    .unwrap();
    assert!(times.iter().all(|t| t.is_finite()));
    let r = ks_test(&times, |t| 1.0 - (-beta * t).exp());
    assert!(r.p_value > 0.01, "{r:?}");
}

fn check_genealogy(log: &EventLog) -> Result<(), String> {
    let mut birth = std::collections::HashMap::new();
    let mut death = std::collections::HashMap::new();
    let mut last = 0.0;
    for e in &log.events {
        if e.time < last {
            return Err(format!("time went backwards at {e:?}"));
        }
        last = e.time;
        match &e.kind {
            EventKind::Birth { .. } | EventKind::Immigration { .. } => {
                birth.insert(e.id, e);
            }
            EventKind::Death { .. } => {
                death.insert(e.id, e);
            }
        }
    }
    for e in &log.events {
        match &e.kind {
            EventKind::Birth { parent: Some(p) } => {
                let d = death.get(p).ok_or(format!("parent {p} of {} never died", e.id))?;
                if d.time != e.time || d.position != e.position {
                    return Err(format!("child {} born at {} but parent died at {}", e.id, e.time, d.time));
                }
                match &d.kind {
                    EventKind::Death { cause: DeathCause::Branched, children } if children.contains(&e.id) => {}
                    other => return Err(format!("parent death {other:?} does not list {}", e.id)),
                }
            }
            EventKind::Death { .. } => {
                let b = birth.get(&e.id).ok_or(format!("{} died without birth", e.id))?;
                if b.time > e.time {
                    return Err(format!("{} died before birth", e.id));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn event_logs_are_genealogically_consistent(
        mu in 0.0f64..1.0,
        beta in 0.5f64..2.0,
        q0 in 0.0f64..0.3,
        q3 in 0.0f64..0.5,
        factor in 0.8f64..2.0,
        frac in 0.05f64..0.95,
        horizon in 0.1f64..2.0,
        seed in any::<u64>(),
    ) {
        let law = OffspringLaw::new([(0, q0), (2, 1.0 - q0 - q3 / 2.0), (3, q3 / 2.0)]).unwrap();
        let params = ModelParams::new(mu, beta, law).unwrap();
        let k = factor * params.critical_width().unwrap_or(3.0);
        let times = [0.25 * horizon, 0.5 * horizon, horizon];
        let cfg = SimConfig::new(frac * k, Tag::Plain, horizon, 0.02, seed).observing(&times).recording().capped(5000);
        let out = run_branching(&cfg, &Dynamics::plain(&params, k).unwrap(), stream(seed, 0, 0)).unwrap();
        prop_assert!(check_genealogy(&out.log).is_ok(), "{:?}", check_genealogy(&out.log));
        if !out.truncated {
            for snap in &out.snapshots {
                prop_assert_eq!(out.log.population_at(snap.time), snap.count());
            }
            let decoded = EventLog::from_bytes(&out.log.to_bytes()).unwrap();
            prop_assert_eq!(&decoded, &out.log);
        }
    }
}
