//! Martingale functionals of simulated populations and Monte Carlo
//! mean-constancy tests.
//!
//! ```text
//! Upsilon(t)  = sin(pi xi_t/K) e^{mu xi_t + (mu²/2 + pi²/(2K²)) t}    single killed particle
//! Z_K(t)      = sum_u sin(pi x_u/K) e^{mu x_u - lambda(K) t}
//! Prod(t)     = prod_u (1 - p_K(x_u))
//! M_f*(t)     = sum_u f*(x_u) e^{-lambda(K) t}                           blue tree
//! M_1(t)      = sum_u exp(-int_0^t F^B'(1, x_u(s)) ds)                   blue tree
//! ```
//! A test passes when every listed time has `|mean(t) - value(0)|` within
//! the Bonferroni-corrected 3-sigma band.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{backbone_dynamics, BackboneError, BackboneRates, FPRIME_BLUE};
use crate::bvp::{BvpError, NodeFunction, SurvivalProfile};
use crate::model::ModelParams;
use crate::sim::{run_replicates, ConstantBranching, Dynamics, SimConfig, SimError, Snapshot, Tag};
use crate::stats::{bonferroni_z, mean_stderr, median, THREE_SIGMA_ALPHA};
use crate::diffusion::MotionSpec;

/// Censored fraction at or above which a test is inconclusive.
pub const MAX_CENSORED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum MartingaleError {
    #[error("{0:?} needs a survival profile")]
    MissingProfile(MartingaleKind),
    #[error("{0:?} needs a nontrivial survival profile")]
    TrivialProfile(MartingaleKind),
    #[error("Upsilon is defined for a single particle, snapshot has {0}")]
    NotSingleParticle(usize),
    #[error("particle {0} carries no path integral for M_1")]
    MissingAccumulator(u64),
    #[error("test needs at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },
    #[error("test times must lie in (0, horizon]")]
    InvalidTimes,
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MartingaleKind {
    Upsilon,
    ZK,
    ProductExtinction,
    Mfstar,
    Mone,
}

#[derive(Debug, Clone)]
pub struct MartingaleSpec {
    pub kind: MartingaleKind,
    pub params: ModelParams,
    pub k: f64,
    profile: Option<Arc<SurvivalProfile>>,
    fstar: Option<NodeFunction>,
    lambda: f64,
}

impl MartingaleSpec {
    pub fn new(kind: MartingaleKind, params: ModelParams, k: f64, profile: Option<Arc<SurvivalProfile>>) -> Result<Self, MartingaleError> {
        let needs_profile = !matches!(kind, MartingaleKind::Upsilon | MartingaleKind::ZK);
        let needs_nontrivial = matches!(kind, MartingaleKind::Mfstar | MartingaleKind::Mone);
        match &profile {
            None if needs_profile => return Err(MartingaleError::MissingProfile(kind)),
            Some(p) if needs_nontrivial && p.is_trivial() => return Err(MartingaleError::TrivialProfile(kind)),
            _ => {}
        }
        let fstar = match (&profile, kind) {
            (Some(p), MartingaleKind::Mfstar) => Some(p.eigenfunction_fstar()?),
            _ => None,
        };
        let lambda = params.lambda_unchecked(k);
        Ok(Self { kind, params, k, profile, fstar, lambda })
    }

    pub fn profile(&self) -> Option<&Arc<SurvivalProfile>> {
        self.profile.as_ref()
    }

    /// Value of the functional on `snapshot` at time `t`.
    pub fn evaluate(&self, snapshot: &Snapshot, t: f64) -> Result<f64, MartingaleError> {
        let (mu, k) = (self.params.mu, self.k);
        let parts = &snapshot.particles;
        Ok(match self.kind {
            MartingaleKind::Upsilon => match parts.len() {
                0 => 0.0,
                1 => {
                    let x = parts[0].x;
                    (PI * x / k).sin() * (mu * x + (0.5 * mu * mu + PI * PI / (2.0 * k * k)) * t).exp()
                }
                n => return Err(MartingaleError::NotSingleParticle(n)),
            },
            MartingaleKind::ZK => {
                let decay = (-self.lambda * t).exp();
                parts.iter().map(|u| (PI * u.x / k).sin() * (mu * u.x).exp()).sum::<f64>() * decay
            }
            MartingaleKind::ProductExtinction => {
                let profile = self.profile.as_ref().expect("checked at construction");
                parts.iter().map(|u| 1.0 - profile.p_at(u.x)).product()
            }
            MartingaleKind::Mfstar => {
                let f = self.fstar.as_ref().expect("checked at construction");
                parts.iter().map(|u| f.at(u.x)).sum::<f64>() * (-self.lambda * t).exp()
            }
            MartingaleKind::Mone => {
                let mut sum = 0.0;
                for u in parts {
                    let integral = u.integrals.first().ok_or(MartingaleError::MissingAccumulator(u.id))?;
                    sum += (-integral).exp();
                }
                sum
            }
        })
    }

    /// Dynamics under which the functional is a martingale, and the root tag.
    pub fn dynamics(&self) -> Result<(Dynamics, Tag), MartingaleError> {
        Ok(match self.kind {
            MartingaleKind::Upsilon => {
                let rule = ConstantBranching { beta: 0.0, law: self.params.offspring.clone() };
                let motion = MotionSpec::killed(self.params.clone(), self.k).map_err(SimError::from)?;
                (Dynamics::new(Arc::new(rule)).with_motion(Tag::Plain, motion), Tag::Plain)
            }
            MartingaleKind::ZK | MartingaleKind::ProductExtinction => (Dynamics::plain(&self.params, self.k)?, Tag::Plain),
            MartingaleKind::Mfstar | MartingaleKind::Mone => {
                let profile = self.profile.clone().expect("checked at construction");
                let rates = BackboneRates::from_profile(profile)?;
                let dynamics = backbone_dynamics(&rates)?;
                debug_assert_eq!(dynamics.accumulator_index(FPRIME_BLUE), Some(0));
                (dynamics, Tag::Blue)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub spec: MartingaleKind,
    pub target: f64,
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub medians: Vec<f64>,
    pub threshold: f64,
    pub replicates: usize,
    pub censored_fraction: f64,
    pub verdict: Verdict,
}

pub const MIN_REPLICATES: usize = 1000;

/// Runs `replicates` copies from one root at `x0` and tests that the mean
/// of the functional stays at its time-0 value at every time in `times`.
pub fn martingale_mean_test(
    spec: &MartingaleSpec,
    x0: f64,
    times: &[f64],
    replicates: usize,
    dt: f64,
    seed: u64,
) -> Result<MartingaleReport, MartingaleError> {
    if replicates < MIN_REPLICATES {
        return Err(MartingaleError::TooFewReplicates { min: MIN_REPLICATES, got: replicates });
    }
    let horizon = times.iter().copied().fold(0.0, f64::max);
    if times.is_empty() || times.iter().any(|&t| !(t > 0.0)) {
        return Err(MartingaleError::InvalidTimes);
    }
    let (dynamics, root) = spec.dynamics()?;
    let mut observe = vec![0.0];
    observe.extend_from_slice(times);
    let cfg = SimConfig::new(x0, root, horizon, dt, seed).observing(&observe);
    let domain = format!("martingale-{:?}", spec.kind);
    let values: Vec<Option<Result<Vec<f64>, MartingaleError>>> = run_replicates(&cfg, &dynamics, &domain, replicates, |_, out| {
        if out.truncated {
            return None;
        }
        Some(out.snapshots.iter().map(|s| spec.evaluate(s, s.time)).collect::<Result<Vec<f64>, _>>())
    })?;
    let mut kept = Vec::with_capacity(replicates);
    for v in values.into_iter().flatten() {
        kept.push(v?);
    }
    let censored_fraction = 1.0 - kept.len() as f64 / replicates as f64;
    let target = kept.first().map(|v| v[0]).unwrap_or(f64::NAN);
    let threshold = bonferroni_z(THREE_SIGMA_ALPHA, times.len());
    let mut means = Vec::new();
    let mut stderrs = Vec::new();
    let mut z_scores = Vec::new();
    let mut medians = Vec::new();
    for j in 1..=times.len() {
        let column: Vec<f64> = kept.iter().map(|v| v[j]).collect();
        let est = mean_stderr(&column);
        let z = if est.stderr > 0.0 {
            (est.mean - target) / est.stderr
        } else if (est.mean - target).abs() <= 1e-12 * target.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        };
        means.push(est.mean);
        stderrs.push(est.stderr);
        z_scores.push(z);
        medians.push(median(&column));
    }
    let verdict = if censored_fraction >= MAX_CENSORED_FRACTION {
        Verdict::Inconclusive
    } else if z_scores.iter().all(|z| z.abs() <= threshold) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(MartingaleReport {
        spec: spec.kind,
        target,
        times: times.to_vec(),
        means,
        stderrs,
        z_scores,
        medians,
        threshold,
        replicates,
        censored_fraction,
        verdict,
    })
}
