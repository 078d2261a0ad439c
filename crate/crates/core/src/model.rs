//! Parameter records and closed-form quantities for branching Brownian motion
//! with drift `-mu`, killed on leaving the strip `(0, K)`.
//!
//! A particle moves according to
//! ```text
//! L = 1/2 d²/dx² - mu d/dx,    x in (0, K)
//! ```
//! and branches at rate `beta` into `A` offspring with law `{q_k}`. The
//! branching mechanism is `F(s) = beta (G(s) - s)` with `G` the generating
//! function of `A`.
//!
//! Derived quantities:
//! ```text
//! K0       = pi / sqrt(2 (m-1) beta - mu²)
//! lambda(K) = (m-1) beta - mu²/2 - pi²/(2 K²)
//! C_K      = (K-K0) (K0² mu² + pi²)(K0² mu² + 9 pi²) / (12 (m-1) beta pi K0³ (e^{mu K0} + 1))
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Tolerance on the total mass of an offspring law.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("offspring probability for k={k} is invalid: {p}")]
    InvalidProbability { k: usize, p: f64 },
    #[error("offspring probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("offspring law is empty")]
    EmptyLaw,
    #[error("branching rate must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("drift magnitude must be non-negative, got {0}")]
    InvalidMu(f64),
    #[error("strip width must be positive, got {0}")]
    InvalidWidth(f64),
    #[error("no critical width: 2(m-1)beta - mu^2 = {0} <= 0")]
    NoCriticalWidth(f64),
    #[error("width {k} is not above the critical width {k0}")]
    NotSupercriticalWidth { k: f64, k0: f64 },
    #[error("argument s = {0} outside [0, 1]")]
    OutOfUnitInterval(f64),
    #[error("offspring mean {0} is not supercritical (m > 1 required)")]
    NotSupercritical(f64),
    #[error("invalid CSBP mechanism: {0}")]
    InvalidMechanism(String),
    #[error("CSBP mechanism has no positive root")]
    NoPositiveRoot,
}

/// Finitely supported offspring distribution `{q_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringLaw {
    probs: Vec<f64>,
}

impl OffspringLaw {
    /// Builds a law from `(k, q_k)` pairs. Repeated `k` are summed.
    pub fn new<I: IntoIterator<Item = (usize, f64)>>(pairs: I) -> Result<Self, ModelError> {
        let mut probs: Vec<f64> = Vec::new();
        for (k, p) in pairs {
            if !p.is_finite() || p < 0.0 {
                return Err(ModelError::InvalidProbability { k, p });
            }
            if probs.len() <= k {
                probs.resize(k + 1, 0.0);
            }
            probs[k] += p;
        }
        while probs.last() == Some(&0.0) {
            probs.pop();
        }
        if probs.is_empty() {
            return Err(ModelError::EmptyLaw);
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(ModelError::NotNormalized(total));
        }
        Ok(Self { probs })
    }

    /// Binary splitting, `q_2 = 1`.
    pub fn dyadic() -> Self {
        Self { probs: vec![0.0, 0.0, 1.0] }
    }

    /// Truncates an infinitely supported law once the remaining tail mass is
    /// below `tail`, then renormalizes.
    pub fn truncated<F: Fn(usize) -> f64>(pmf: F, tail: f64) -> Result<Self, ModelError> {
        let mut probs = Vec::new();
        let mut mass = 0.0;
        for k in 0..100_000 {
            let p = pmf(k);
            if !p.is_finite() || p < 0.0 {
                return Err(ModelError::InvalidProbability { k, p });
            }
            probs.push(p);
            mass += p;
            if 1.0 - mass < tail {
                break;
            }
        }
        if mass <= 0.0 {
            return Err(ModelError::EmptyLaw);
        }
        Self::new(probs.into_iter().map(|p| p / mass).enumerate())
    }

    /// `q_k` (zero outside the support).
    pub fn prob(&self, k: usize) -> f64 {
        self.probs.get(k).copied().unwrap_or(0.0)
    }

    /// Dense probabilities indexed by `k`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Largest `k` with `q_k > 0`.
    pub fn max_offspring(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// `E[A(A-1)]`.
    pub fn factorial_moment2(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| (k as f64) * (k as f64 - 1.0) * p)
            .sum()
    }

    /// `E[A log(1+A)]`; always finite for a finite support.
    pub fn log_moment(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| k as f64 * (1.0 + k as f64).ln() * p)
            .sum()
    }

    /// Probability generating function `G(s)`.
    pub fn pgf(&self, s: f64) -> f64 {
        self.probs.iter().rev().fold(0.0, |acc, &p| acc * s + p)
    }

    /// `G'(s)`.
    pub fn pgf_derivative(&self, s: f64) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &p)| acc * s + k as f64 * p)
    }

    /// `(1 - G(1-p)) / p`, evaluated without cancellation as
    /// `sum_k q_k sum_{j<k} (1-p)^j`. Equals `m` at `p = 0`.
    pub fn one_minus_pgf_over_p(&self, p: f64) -> f64 {
        let s = 1.0 - p;
        let mut partial = 0.0; // sum_{j<k} s^j
        let mut power = 1.0;
        let mut total = 0.0;
        for &q in self.probs.iter().skip(1) {
            partial += power;
            power *= s;
            total += q * partial;
        }
        total
    }

    /// Size-biased law `q~_k = q_{k+1} (k+1) / m`.
    pub fn size_biased(&self) -> Result<Self, ModelError> {
        let m = self.mean();
        if m <= 0.0 {
            return Err(ModelError::NotSupercritical(m));
        }
        Self::new(
            self.probs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &p)| (k - 1, p * k as f64 / m)),
        )
    }

    /// Inverse-CDF sample from a uniform draw `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.max_offspring()
    }
}

impl Serialize for OffspringLaw {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<String, f64> = self
            .probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(k, &p)| (k.to_string(), p))
            .collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for OffspringLaw {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(deserializer)?;
        let mut pairs = Vec::with_capacity(map.len());
        for (key, p) in map {
            let k: usize = key
                .trim()
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("offspring key {key:?} is not a count")))?;
            pairs.push((k, p));
        }
        OffspringLaw::new(pairs).map_err(serde::de::Error::custom)
    }
}

/// The triple `(mu, beta, {q_k})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mu: f64,
    pub beta: f64,
    pub offspring: OffspringLaw,
}

impl ModelParams {
    pub fn new(mu: f64, beta: f64, offspring: OffspringLaw) -> Result<Self, ModelError> {
        let params = Self { mu, beta, offspring };
        params.validate()?;
        Ok(params)
    }

    /// Dyadic branching at rate `beta`.
    pub fn dyadic(mu: f64, beta: f64) -> Self {
        Self { mu, beta, offspring: OffspringLaw::dyadic() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(ModelError::InvalidBeta(self.beta));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(ModelError::InvalidMu(self.mu));
        }
        Ok(())
    }

    /// Simulators only accept supercritical offspring laws.
    pub fn require_supercritical(&self) -> Result<(), ModelError> {
        let m = self.mean_offspring();
        if m > 1.0 {
            Ok(())
        } else {
            Err(ModelError::NotSupercritical(m))
        }
    }

    pub fn mean_offspring(&self) -> f64 {
        self.offspring.mean()
    }

    /// `2(m-1)beta - mu²`; positive iff a critical width exists.
    pub fn criticality_margin(&self) -> f64 {
        2.0 * (self.mean_offspring() - 1.0) * self.beta - self.mu * self.mu
    }

    /// Critical width `K0`, absent when survival is impossible at every width.
    pub fn critical_width(&self) -> Option<f64> {
        let margin = self.criticality_margin();
        (margin > 0.0).then(|| PI / margin.sqrt())
    }

    /// `lambda(K) = (m-1)beta - mu²/2 - pi²/(2K²)`.
    pub fn lambda_rate(&self, k: f64) -> Result<f64, ModelError> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(ModelError::InvalidWidth(k));
        }
        Ok(self.lambda_unchecked(k))
    }

    pub(crate) fn lambda_unchecked(&self, k: f64) -> f64 {
        (self.mean_offspring() - 1.0) * self.beta - 0.5 * self.mu * self.mu - PI * PI / (2.0 * k * k)
    }

    /// First-order constant `C_K` in `p_K(x) ~ C_K sin(pi x/K0) e^{mu x}`.
    pub fn asymptotic_constant(&self, k: f64) -> Result<f64, ModelError> {
        let k0 = self
            .critical_width()
            .ok_or(ModelError::NoCriticalWidth(self.criticality_margin()))?;
        if !(k > k0) {
            return Err(ModelError::NotSupercriticalWidth { k, k0 });
        }
        Ok((k - k0) * self.asymptotic_slope(k0))
    }

    /// `dC_K/dK` at `K0`.
    fn asymptotic_slope(&self, k0: f64) -> f64 {
        let a = k0 * k0 * self.mu * self.mu;
        let m1b = (self.mean_offspring() - 1.0) * self.beta;
        (a + PI * PI) * (a + 9.0 * PI * PI) / (12.0 * m1b * PI * k0.powi(3) * ((self.mu * k0).exp() + 1.0))
    }

    /// `F(s) = beta (G(s) - s)` on `[0, 1]`.
    pub fn branching_mechanism(&self, s: f64) -> Result<f64, ModelError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(ModelError::OutOfUnitInterval(s));
        }
        Ok(self.mechanism(s))
    }

    #[inline]
    pub(crate) fn mechanism(&self, s: f64) -> f64 {
        self.beta * (self.offspring.pgf(s) - s)
    }

    #[inline]
    pub(crate) fn mechanism_derivative(&self, s: f64) -> f64 {
        self.beta * (self.offspring.pgf_derivative(s) - 1.0)
    }

    /// Largest root of `F` in `[0, 1)`: the extinction probability of the
    /// embedded Galton-Watson process. Returns 1 when `m <= 1`.
    pub fn gw_extinction_probability(&self) -> f64 {
        if self.mean_offspring() <= 1.0 {
            return 1.0;
        }
        // G(s) - s is positive below the root and negative between root and 1.
        let (mut lo, mut hi) = (0.0, 1.0 - 1e-15);
        if self.offspring.pgf(0.0) == 0.0 {
            return 0.0;
        }
        while self.offspring.pgf(hi) - hi >= 0.0 {
            hi = 1.0 - 2.0 * (1.0 - hi);
            if hi <= 0.0 {
                return 0.0;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.offspring.pgf(mid) - mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn derived(&self) -> DerivedConstants {
        let k0 = self.critical_width();
        DerivedConstants {
            m: self.mean_offspring(),
            k0,
            ck_slope: k0.map(|k0| self.asymptotic_slope(k0)),
        }
    }
}

/// Summary of the closed-form quantities for one parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub m: f64,
    pub k0: Option<f64>,
    pub ck_slope: Option<f64>,
}

/// Branching mechanism of a supercritical continuous-state branching process
/// with purely atomic Lévy measure:
/// ```text
/// psi(l) = -alpha l + b l² + sum_y pi_y (e^{-l y} - 1 + l y)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsbpMechanism {
    pub alpha: f64,
    pub b: f64,
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
}

impl CsbpMechanism {
    pub fn quadratic(alpha: f64, b: f64) -> Self {
        Self { alpha, b, atoms: Vec::new() }
    }

    pub fn psi(&self, l: f64) -> f64 {
        let jumps: f64 = self
            .atoms
            .iter()
            .map(|&(y, mass)| mass * ((-l * y).exp_m1() + l * y))
            .sum();
        -self.alpha * l + self.b * l * l + jumps
    }

    fn psi_derivative(&self, l: f64) -> f64 {
        let jumps: f64 = self.atoms.iter().map(|&(y, mass)| mass * y * (-(-l * y).exp_m1())).sum();
        -self.alpha + 2.0 * self.b * l + jumps
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !self.b.is_finite() || self.b < 0.0 {
            return Err(ModelError::InvalidMechanism(format!("quadratic coefficient {} < 0", self.b)));
        }
        for &(y, mass) in &self.atoms {
            if !(y > 0.0) || !y.is_finite() || !(mass >= 0.0) || !mass.is_finite() {
                return Err(ModelError::InvalidMechanism(format!("atom ({y}, {mass})")));
            }
        }
        if !self.alpha.is_finite() {
            return Err(ModelError::InvalidMechanism(format!("alpha {}", self.alpha)));
        }
        Ok(())
    }

    /// Positive root `lambda*` by bracket expansion from `[eps, 1]` and
    /// bisection to relative tolerance 1e-10, polished by Newton steps.
    pub fn positive_root(&self) -> Result<f64, ModelError> {
        self.validate()?;
        if !(self.alpha > 0.0) {
            return Err(ModelError::NoPositiveRoot);
        }
        let mut lo = 1e-12_f64.min(0.5 / (1.0 + self.b));
        if self.psi(lo) >= 0.0 {
            return Err(ModelError::NoPositiveRoot);
        }
        let mut hi = 1.0_f64;
        let mut doublings = 0;
        while self.psi(hi) <= 0.0 {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > 1100 || !hi.is_finite() {
                return Err(ModelError::NoPositiveRoot);
            }
        }
        while hi - lo > 1e-10 * hi {
            let mid = 0.5 * (lo + hi);
            if self.psi(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut root = 0.5 * (lo + hi);
        for _ in 0..4 {
            let d = self.psi_derivative(root);
            if d <= 0.0 {
                break;
            }
            let next = root - self.psi(root) / d;
            if !(next > lo && next < hi) {
                break;
            }
            root = next;
        }
        Ok(root)
    }
}

/// Branching mechanism `F(s) = psi(lambda* (1-s)) / lambda*` induced by a
/// CSBP mechanism. The survival probabilities are linked by `w_K = lambda* p_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedMechanism {
    pub psi: CsbpMechanism,
    pub lambda_star: f64,
    /// Exact dyadic representation `(beta, law)` when `psi` is purely quadratic.
    pub dyadic: Option<ModelParams>,
}

impl MappedMechanism {
    pub fn eval(&self, s: f64) -> f64 {
        self.psi.psi(self.lambda_star * (1.0 - s)) / self.lambda_star
    }

    /// `w_K(x) = lambda* p_K(x)` at each supplied survival probability.
    pub fn survival_rate(&self, p: &[f64]) -> Vec<f64> {
        p.iter().map(|&v| self.lambda_star * v).collect()
    }
}

pub fn map_csbp_mechanism(psi: &CsbpMechanism) -> Result<MappedMechanism, ModelError> {
    let pure_quadratic = psi.atoms.iter().all(|&(_, mass)| mass == 0.0);
    let lambda_star = if pure_quadratic && psi.b > 0.0 && psi.alpha > 0.0 {
        psi.validate()?;
        psi.alpha / psi.b
    } else {
        psi.positive_root()?
    };
    let dyadic = pure_quadratic.then(|| ModelParams::dyadic(0.0, psi.alpha));
    Ok(MappedMechanism { psi: psi.clone(), lambda_star, dyadic })
}
