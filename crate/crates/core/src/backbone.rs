//! Backbone decomposition of the supercritical process.
//!
//! With `p = p_K(y)` the rates of the blue (surviving) tree, the red
//! (doomed) trees and the immigration of red trees along blue lines are
//! ```text
//! beta_B(y) q_B(k|y) = beta sum_{n>=k} q_n C(n,k) p^{k-1} (1-p)^{n-k}      k >= 2
//! beta_I(n|y)        = beta q_{n+1} (n+1) (1-p)^n                          n >= 1
//! q_I(n | k, y)     ∝ q_{n+k} C(n+k,k) (1-p)^n                            n >= 0
//! beta_R(y) q_R(k|y) = beta q_k (1-p)^{k-1}
//! beta_D(y)          = beta (1 - G(1-p)) / p
//! ```
//! The quasi-stationary process runs a conditioned spine at `K0` which
//! sheds size-biased numbers of plain killed copies at rate `m beta`.

use std::sync::Arc;

use thiserror::Error;

use crate::bvp::SurvivalProfile;
use crate::diffusion::{DiffusionError, MotionSpec};
use crate::model::{ModelError, ModelParams, OffspringLaw};
use crate::rng::{uniform, SimRng};
use crate::sim::{run_branching, BranchingRule, Dynamics, Offspring, RunOutput, SimConfig, SimError, Tag};

/// Name of the path integral of `F^B'(1, .)` in backbone runs.
pub const FPRIME_BLUE: &str = "fprime_blue";

/// Points of the `p`-grid used to bound the rates from above.
const BOUND_SCAN: usize = 2000;
const BOUND_MARGIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("backbone rates need a nontrivial survival profile")]
    TrivialProfile,
    #[error("blue branching rate vanishes at interior node x={0}")]
    VanishingBlueRate(f64),
    #[error("no critical width for these parameters")]
    NoCriticalWidth,
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Draws an index with probability proportional to `weights`.
fn sample_weighted(weights: &[f64], rng: &mut SimRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = uniform(rng) * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Rate tables of the backbone decomposition, evaluated from `p_K`.
#[derive(Debug, Clone)]
pub struct BackboneRates {
    profile: Arc<SurvivalProfile>,
    beta: f64,
    law: OffspringLaw,
    blue_bound: f64,
    red_bound: f64,
    immigration_bound: f64,
}

impl BackboneRates {
    pub fn from_profile(profile: Arc<SurvivalProfile>) -> Result<Self, BackboneError> {
        if profile.is_trivial() {
            return Err(BackboneError::TrivialProfile);
        }
        let params = profile.params.clone();
        let mut rates = Self {
            beta: params.beta,
            law: params.offspring.clone(),
            profile,
            blue_bound: 0.0,
            red_bound: 0.0,
            immigration_bound: 0.0,
        };
        let nodes = rates.profile.nodes();
        for (i, &p) in rates.profile.p.iter().enumerate().take(nodes.len() - 1).skip(1) {
            if !(rates.beta_b_p(p) > 0.0) {
                return Err(BackboneError::VanishingBlueRate(nodes[i]));
            }
        }
        let p_max = rates.profile.max_p();
        let (mut b, mut r, mut im) = (0.0_f64, 0.0_f64, 0.0_f64);
        for j in 0..=BOUND_SCAN {
            let p = p_max * j as f64 / BOUND_SCAN as f64;
            b = b.max(rates.beta_b_p(p));
            r = r.max(rates.beta_r_p(p));
            im = im.max(rates.beta_i_total_p(p));
        }
        rates.blue_bound = b * (1.0 + BOUND_MARGIN);
        rates.red_bound = r * (1.0 + BOUND_MARGIN);
        rates.immigration_bound = im * (1.0 + BOUND_MARGIN);
        Ok(rates)
    }

    pub fn profile(&self) -> &Arc<SurvivalProfile> {
        &self.profile
    }

    pub fn params(&self) -> &ModelParams {
        &self.profile.params
    }

    fn p(&self, y: f64) -> f64 {
        self.profile.p_at(y)
    }

    /// `beta_B q_B(k) / p` for `k = 0..=max`, finite as `p -> 0`.
    fn blue_weights_over_p(&self, p: f64) -> Vec<f64> {
        let max = self.law.max_offspring();
        let mut w = vec![0.0; max + 1];
        for (k, slot) in w.iter_mut().enumerate().skip(2) {
            let mut sum = 0.0;
            for n in k..=max {
                let q = self.law.prob(n);
                if q > 0.0 {
                    sum += q * binomial(n, k) * (1.0 - p).powi((n - k) as i32);
                }
            }
            *slot = self.beta * sum * p.powi(k as i32 - 2);
        }
        w
    }

    pub fn beta_b_p(&self, p: f64) -> f64 {
        p * self.blue_weights_over_p(p).iter().sum::<f64>()
    }

    /// `q_B(k | p)` for `k = 0..=max` (zero below 2). At `p = 0` this is the
    /// limit law, concentrated on the smallest `k >= 2` with positive weight.
    pub fn q_b_p(&self, p: f64) -> Vec<f64> {
        let w = self.blue_weights_over_p(p);
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    pub fn beta_i_p(&self, n: usize, p: f64) -> f64 {
        if n == 0 {
            return 0.0;
        }
        self.beta * self.law.prob(n + 1) * (n + 1) as f64 * (1.0 - p).powi(n as i32)
    }

    pub fn beta_i_total_p(&self, p: f64) -> f64 {
        (1..self.law.max_offspring()).map(|n| self.beta_i_p(n, p)).sum()
    }

    /// `q_I(n | k, p)` for `n = 0..=max-k`, normalized over `n`.
    pub fn q_i_p(&self, k: usize, p: f64) -> Vec<f64> {
        let max = self.law.max_offspring();
        if k > max {
            return vec![1.0];
        }
        let w: Vec<f64> = (0..=max - k)
            .map(|n| self.law.prob(n + k) * binomial(n + k, k) * (1.0 - p).powi(n as i32))
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter().map(|v| v / total).collect()
        } else {
            let mut d = vec![0.0; w.len()];
            d[0] = 1.0;
            d
        }
    }

    fn red_weight(&self, k: usize, p: f64) -> f64 {
        let q = self.law.prob(k);
        if q > 0.0 {
            self.beta * q * (1.0 - p).powi(k as i32 - 1)
        } else {
            0.0
        }
    }

    pub fn beta_r_p(&self, p: f64) -> f64 {
        (0..=self.law.max_offspring())
            .map(|k| self.red_weight(k, p))
            .sum()
    }

    pub fn q_r_p(&self, p: f64) -> Vec<f64> {
        let w: Vec<f64> = (0..=self.law.max_offspring())
            .map(|k| self.red_weight(k, p))
            .collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }

    /// `beta (1 - G(1-p)) / p`, with limit `m beta` at `p = 0`.
    pub fn beta_d_p(&self, p: f64) -> f64 {
        self.beta * self.law.one_minus_pgf_over_p(p)
    }

    /// Right-hand side of the decomposition of `beta_D`. The `beta q_1`
    /// term is the rate of single-child events, which change nothing in the
    /// dressed tree.
    pub fn beta_d_decomposed_p(&self, p: f64) -> f64 {
        self.beta_b_p(p) + self.beta_i_total_p(p) + self.beta * self.law.prob(1)
    }

    pub fn beta_b(&self, y: f64) -> f64 {
        self.beta_b_p(self.p(y))
    }

    pub fn q_b(&self, y: f64) -> Vec<f64> {
        self.q_b_p(self.p(y))
    }

    pub fn beta_i(&self, n: usize, y: f64) -> f64 {
        self.beta_i_p(n, self.p(y))
    }

    pub fn beta_i_total(&self, y: f64) -> f64 {
        self.beta_i_total_p(self.p(y))
    }

    pub fn q_i(&self, k: usize, y: f64) -> Vec<f64> {
        self.q_i_p(k, self.p(y))
    }

    pub fn beta_r(&self, y: f64) -> f64 {
        self.beta_r_p(self.p(y))
    }

    pub fn q_r(&self, y: f64) -> Vec<f64> {
        self.q_r_p(self.p(y))
    }

    pub fn beta_d(&self, y: f64) -> f64 {
        self.beta_d_p(self.p(y))
    }

    pub fn blue_rate_bound(&self) -> f64 {
        self.blue_bound
    }

    pub fn red_rate_bound(&self) -> f64 {
        self.red_bound
    }

    pub fn immigration_rate_bound(&self) -> f64 {
        self.immigration_bound
    }
}

/// Branching of the blue tree, optionally dressed with red immigration.
#[derive(Debug, Clone)]
pub struct BackboneRule {
    rates: BackboneRates,
    dressed: bool,
}

impl BackboneRule {
    pub fn new(rates: BackboneRates, dressed: bool) -> Self {
        Self { rates, dressed }
    }
}

impl BranchingRule for BackboneRule {
    fn rate_bound(&self, tag: Tag) -> f64 {
        match tag {
            Tag::Blue => self.rates.blue_bound,
            Tag::Red => self.rates.red_bound,
            _ => 0.0,
        }
    }

    fn rate(&self, tag: Tag, x: f64) -> f64 {
        match tag {
            Tag::Blue => self.rates.beta_b(x),
            Tag::Red => self.rates.beta_r(x),
            _ => 0.0,
        }
    }

    fn sample(&self, tag: Tag, x: f64, rng: &mut SimRng) -> Offspring {
        let p = self.rates.p(x);
        match tag {
            Tag::Blue => {
                let k = sample_weighted(&self.rates.q_b_p(p), rng);
                let n = if self.dressed { sample_weighted(&self.rates.q_i_p(k, p), rng) } else { 0 };
                Offspring { children: vec![Tag::Blue; k], immigrants: vec![Tag::Red; n] }
            }
            _ => {
                let k = sample_weighted(&self.rates.q_r_p(p), rng);
                Offspring { children: vec![Tag::Red; k], immigrants: Vec::new() }
            }
        }
    }

    fn immigration_bound(&self, tag: Tag) -> f64 {
        if self.dressed && tag == Tag::Blue {
            self.rates.immigration_bound
        } else {
            0.0
        }
    }

    fn immigration_rate(&self, tag: Tag, x: f64) -> f64 {
        if self.dressed && tag == Tag::Blue {
            self.rates.beta_i_total(x)
        } else {
            0.0
        }
    }

    fn sample_immigrants(&self, _tag: Tag, x: f64, rng: &mut SimRng) -> Vec<Tag> {
        let p = self.rates.p(x);
        let weights: Vec<f64> = (0..self.rates.law.max_offspring()).map(|n| self.rates.beta_i_p(n, p)).collect();
        vec![Tag::Red; sample_weighted(&weights, rng)]
    }
}

/// Spine immigration at rate `m beta` with size-biased counts; the
/// immigrants branch as the plain process.
#[derive(Debug, Clone)]
pub struct QuasiStationaryRule {
    beta: f64,
    law: OffspringLaw,
    size_biased: OffspringLaw,
    mean: f64,
}

impl QuasiStationaryRule {
    pub fn new(params: &ModelParams) -> Result<Self, BackboneError> {
        Ok(Self {
            beta: params.beta,
            law: params.offspring.clone(),
            size_biased: params.offspring.size_biased()?,
            mean: params.mean_offspring(),
        })
    }
}

impl BranchingRule for QuasiStationaryRule {
    fn rate_bound(&self, tag: Tag) -> f64 {
        if tag == Tag::Spine {
            0.0
        } else {
            self.beta
        }
    }

    fn rate(&self, tag: Tag, _x: f64) -> f64 {
        self.rate_bound(tag)
    }

    fn sample(&self, tag: Tag, _x: f64, rng: &mut SimRng) -> Offspring {
        let k = self.law.sample_with(uniform(rng));
        Offspring { children: vec![tag; k], immigrants: Vec::new() }
    }

    fn immigration_bound(&self, tag: Tag) -> f64 {
        if tag == Tag::Spine {
            self.mean * self.beta
        } else {
            0.0
        }
    }

    fn immigration_rate(&self, tag: Tag, _x: f64) -> f64 {
        self.immigration_bound(tag)
    }

    fn sample_immigrants(&self, _tag: Tag, _x: f64, rng: &mut SimRng) -> Vec<Tag> {
        vec![Tag::Plain; self.size_biased.sample_with(uniform(rng))]
    }
}

/// Independent Bernoulli(`p_K(x_i)`) marks; returns the number of successes
/// and the mask.
pub fn thin_population(positions: &[f64], profile: &SurvivalProfile, rng: &mut SimRng) -> (usize, Vec<bool>) {
    let mask: Vec<bool> = positions.iter().map(|&x| uniform(rng) < profile.p_at(x)).collect();
    (mask.iter().filter(|&&b| b).count(), mask)
}

/// Blue motion with `beta_B, q_B`, and an `fprime_blue` accumulator of
/// `int F^B'(1, x_u(s)) ds` along every line.
pub fn backbone_dynamics(rates: &BackboneRates) -> Result<Dynamics, BackboneError> {
    let blue = MotionSpec::blue(rates.profile.clone())?;
    let profile = rates.profile.clone();
    Ok(Dynamics::new(Arc::new(BackboneRule::new(rates.clone(), false)))
        .with_motion(Tag::Blue, blue)
        .with_accumulator(FPRIME_BLUE, Arc::new(move |_, x| profile.fprime_blue_at(x))))
}

pub fn dressed_dynamics(rates: &BackboneRates) -> Result<Dynamics, BackboneError> {
    let blue = MotionSpec::blue(rates.profile.clone())?;
    let red = MotionSpec::red(rates.profile.clone())?;
    Ok(Dynamics::new(Arc::new(BackboneRule::new(rates.clone(), true)))
        .with_motion(Tag::Blue, blue)
        .with_motion(Tag::Red, red))
}

pub fn quasistationary_dynamics(params: &ModelParams) -> Result<Dynamics, BackboneError> {
    let k0 = params.critical_width().ok_or(BackboneError::NoCriticalWidth)?;
    Ok(Dynamics::new(Arc::new(QuasiStationaryRule::new(params)?))
        .with_motion(Tag::Spine, MotionSpec::conditioned(params.clone(), k0)?)
        .with_motion(Tag::Plain, MotionSpec::killed(params.clone(), k0)?))
}

fn rooted(cfg: &SimConfig, x0: f64, tag: Tag) -> SimConfig {
    SimConfig { roots: vec![(x0, tag)], ..cfg.clone() }
}

/// The blue tree alone from one blue particle at `x0`.
pub fn simulate_backbone(rates: &BackboneRates, x0: f64, cfg: &SimConfig, rng: SimRng) -> Result<RunOutput, BackboneError> {
    Ok(run_branching(&rooted(cfg, x0, Tag::Blue), &backbone_dynamics(rates)?, rng)?)
}

/// The dressed tree from one particle of colour `root` (blue or red) at `x0`.
pub fn simulate_dressed(rates: &BackboneRates, x0: f64, root: Tag, cfg: &SimConfig, rng: SimRng) -> Result<RunOutput, BackboneError> {
    Ok(run_branching(&rooted(cfg, x0, root), &dressed_dynamics(rates)?, rng)?)
}

/// The quasi-stationary process at `K0` from a spine at `x0`.
pub fn simulate_quasistationary(params: &ModelParams, x0: f64, cfg: &SimConfig, rng: SimRng) -> Result<RunOutput, BackboneError> {
    Ok(run_branching(&rooted(cfg, x0, Tag::Spine), &quasistationary_dynamics(params)?, rng)?)
}
