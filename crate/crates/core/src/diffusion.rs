//! Single-particle motions on the strip `(0, K)`.
//!
//! ```text
//! KilledDrifted   b(x) = -mu                      killed at 0 and K
//! Conditioned     b(x) = (pi/K) cot(pi x/K)      entrance boundaries
//! Red             b(x) = -(mu + p'/(1-p))        killed at 0 and K
//! Blue            b(x) = -mu + p'/p              entrance boundaries
//! ```
//!
//! All four are stepped by Euler-Maruyama. The killed motions get a
//! Brownian-bridge crossing test after each step, so that excursions out of
//! the strip between grid times still kill. The singular motions shrink the
//! step near the boundary, where the drift behaves like `1/dist`.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvp::SurvivalProfile;
use crate::model::{ModelError, ModelParams};
use crate::rng::{normal, uniform, SimRng};

/// Relative distance to the boundary at which motions are stopped.
pub const BOUNDARY_BUFFER: f64 = 1e-12;
const MAX_RETRIES: usize = 30;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0:?} motion needs a nontrivial survival profile")]
    MissingProfile(MotionKind),
    #[error("profile width {profile} does not match motion width {motion}")]
    WidthMismatch { profile: f64, motion: f64 },
    #[error("position {x} outside the strip (0, {k})")]
    OutsideStrip { x: f64, k: f64 },
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("{kind:?} motion reached the boundary buffer from x={x}: step size too large")]
    BoundaryReached { kind: MotionKind, x: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionKind {
    KilledDrifted,
    Conditioned,
    Red,
    Blue,
}

impl MotionKind {
    /// Whether the motion is removed on reaching the boundary.
    pub fn is_killed(self) -> bool {
        matches!(self, MotionKind::KilledDrifted | MotionKind::Red)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Boundary {
    Zero,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepStatus {
    Alive(f64),
    KilledAt0,
    KilledAtK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub status: StepStatus,
    pub elapsed: f64,
}

/// Result of advancing a motion over a time interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Advance {
    Alive(f64),
    Killed { boundary: Boundary, elapsed: f64 },
}

#[derive(Debug, Clone)]
pub struct MotionSpec {
    kind: MotionKind,
    params: ModelParams,
    k: f64,
    profile: Option<Arc<SurvivalProfile>>,
}

impl MotionSpec {
    pub fn killed(params: ModelParams, k: f64) -> Result<Self, DiffusionError> {
        Self::without_profile(MotionKind::KilledDrifted, params, k)
    }

    pub fn conditioned(params: ModelParams, k: f64) -> Result<Self, DiffusionError> {
        Self::without_profile(MotionKind::Conditioned, params, k)
    }

    fn without_profile(kind: MotionKind, params: ModelParams, k: f64) -> Result<Self, DiffusionError> {
        params.validate()?;
        if !(k > 0.0 && k.is_finite()) {
            return Err(ModelError::InvalidWidth(k).into());
        }
        Ok(Self { kind, params, k, profile: None })
    }

    pub fn red(profile: Arc<SurvivalProfile>) -> Result<Self, DiffusionError> {
        Self::with_profile(MotionKind::Red, profile)
    }

    pub fn blue(profile: Arc<SurvivalProfile>) -> Result<Self, DiffusionError> {
        Self::with_profile(MotionKind::Blue, profile)
    }

    fn with_profile(kind: MotionKind, profile: Arc<SurvivalProfile>) -> Result<Self, DiffusionError> {
        if profile.is_trivial() {
            return Err(DiffusionError::MissingProfile(kind));
        }
        Ok(Self { kind, params: profile.params.clone(), k: profile.width(), profile: Some(profile) })
    }

    /// Checks that a profile-free motion and `profile` live on the same strip.
    pub fn check_profile(&self, profile: &SurvivalProfile) -> Result<(), DiffusionError> {
        if (profile.width() - self.k).abs() > 1e-12 * self.k {
            return Err(DiffusionError::WidthMismatch { profile: profile.width(), motion: self.k });
        }
        Ok(())
    }

    pub fn kind(&self) -> MotionKind {
        self.kind
    }

    pub fn width(&self) -> f64 {
        self.k
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn profile(&self) -> Option<&Arc<SurvivalProfile>> {
        self.profile.as_ref()
    }

    pub fn drift(&self, x: f64) -> f64 {
        let mu = self.params.mu;
        match self.kind {
            MotionKind::KilledDrifted => -mu,
            MotionKind::Conditioned => conditioned_drift(self.k, x),
            MotionKind::Red => {
                let profile = self.profile.as_ref().expect("red motion has a profile");
                -(mu + profile.dp_at(x) / (1.0 - profile.p_at(x)))
            }
            MotionKind::Blue => {
                let profile = self.profile.as_ref().expect("blue motion has a profile");
                -mu + profile.dp_at(x) / profile.p_at(x)
            }
        }
    }

    fn check_position(&self, x: f64) -> Result<(), DiffusionError> {
        if x > 0.0 && x < self.k {
            Ok(())
        } else {
            Err(DiffusionError::OutsideStrip { x, k: self.k })
        }
    }

    /// One Euler-Maruyama step of nominal size `dt` from `x`.
    pub fn step(&self, x: f64, dt: f64, rng: &mut SimRng) -> Result<StepOutcome, DiffusionError> {
        self.check_position(x)?;
        if !(dt > 0.0) {
            return Err(DiffusionError::InvalidStep(dt));
        }
        if self.kind.is_killed() {
            Ok(self.killed_step(x, dt, rng))
        } else {
            self.entrance_step(x, dt, rng)
        }
    }

    fn killed_step(&self, x: f64, dt: f64, rng: &mut SimRng) -> StepOutcome {
        let k = self.k;
        let next = x + self.drift(x) * dt + dt.sqrt() * normal(rng);
        let buffer = BOUNDARY_BUFFER * k;
        let status = if next <= buffer {
            StepStatus::KilledAt0
        } else if next >= k - buffer {
            StepStatus::KilledAtK
        } else if bridge_crosses(x, next, dt, rng) {
            StepStatus::KilledAt0
        } else if bridge_crosses(k - x, k - next, dt, rng) {
            StepStatus::KilledAtK
        } else {
            StepStatus::Alive(next)
        };
        StepOutcome { status, elapsed: dt }
    }

    fn entrance_step(&self, x: f64, dt: f64, rng: &mut SimRng) -> Result<StepOutcome, DiffusionError> {
        let k = self.k;
        let buffer = BOUNDARY_BUFFER * k;
        let dist = x.min(k - x);
        let b = self.drift(x);
        let mut h = dt.min(dist / (4.0 * b.abs().max(1e-300))).min(dist * dist / 16.0);
        for _ in 0..MAX_RETRIES {
            let next = x + b * h + h.sqrt() * normal(rng);
            if next > buffer && next < k - buffer {
                return Ok(StepOutcome { status: StepStatus::Alive(next), elapsed: h });
            }
            h *= 0.25;
        }
        Err(DiffusionError::BoundaryReached { kind: self.kind, x })
    }

    /// Advances from `x` over `duration`, calling `on_step(x_old, x_new, h)`
    /// after each step that ends alive.
    pub fn advance_with<F>(&self, x: f64, duration: f64, dt: f64, rng: &mut SimRng, mut on_step: F) -> Result<Advance, DiffusionError>
    where
        F: FnMut(f64, f64, f64),
    {
        self.check_position(x)?;
        if !(dt > 0.0) {
            return Err(DiffusionError::InvalidStep(dt));
        }
        let mut pos = x;
        let mut elapsed = 0.0;
        while elapsed < duration {
            let remaining = duration - elapsed;
            let h = if remaining < dt * (1.0 + 1e-9) { remaining } else { dt };
            let outcome = if self.kind.is_killed() {
                self.killed_step(pos, h, rng)
            } else {
                self.entrance_step(pos, h, rng)?
            };
            elapsed = if outcome.elapsed == h && h == remaining { duration } else { elapsed + outcome.elapsed };
            match outcome.status {
                StepStatus::Alive(next) => {
                    on_step(pos, next, outcome.elapsed);
                    pos = next;
                }
                StepStatus::KilledAt0 => return Ok(Advance::Killed { boundary: Boundary::Zero, elapsed }),
                StepStatus::KilledAtK => return Ok(Advance::Killed { boundary: Boundary::Width, elapsed }),
            }
        }
        Ok(Advance::Alive(pos))
    }

    pub fn advance(&self, x: f64, duration: f64, dt: f64, rng: &mut SimRng) -> Result<Advance, DiffusionError> {
        self.advance_with(x, duration, dt, rng, |_, _, _| {})
    }
}

/// `(pi/K) cot(pi x/K)`.
pub fn conditioned_drift(k: f64, x: f64) -> f64 {
    let a = PI * x / k;
    PI / k * a.cos() / a.sin()
}

/// Uniform-draw test for a Brownian bridge from distance `d0` to `d1` above
/// a boundary crossing it within time `dt`.
fn bridge_crosses(d0: f64, d1: f64, dt: f64, rng: &mut SimRng) -> bool {
    let prob = (-2.0 * d0 * d1 / dt).exp();
    prob > 0.0 && uniform(rng) < prob
}

/// Occupation-time histogram over equal bins of `[0, K]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("left,right,fraction\n");
        for (i, f) in self.fractions.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], f));
        }
        out
    }
}

fn bin_of(x: f64, k: f64, bins: usize) -> usize {
    ((x / k * bins as f64) as usize).min(bins - 1)
}

/// Fraction of time in each of `bins` equal bins along one trajectory of
/// duration `horizon`.
pub fn sample_occupation(
    motion: &MotionSpec,
    x0: f64,
    horizon: f64,
    bins: usize,
    dt: f64,
    rng: &mut SimRng,
) -> Result<Histogram, DiffusionError> {
    let k = motion.width();
    let mut time = vec![0.0; bins];
    let mut total = 0.0;
    motion.advance_with(x0, horizon, dt, rng, |x, _, h| {
        time[bin_of(x, k, bins)] += h;
        total += h;
    })?;
    let edges = (0..=bins).map(|i| k * i as f64 / bins as f64).collect();
    let fractions = time.iter().map(|t| if total > 0.0 { t / total } else { 0.0 }).collect();
    Ok(Histogram { edges, fractions })
}

/// Positions at times `interval, 2 interval, ...` up to `horizon`, for
/// tests that need approximately independent draws from the stationary law.
pub fn sample_positions(
    motion: &MotionSpec,
    x0: f64,
    horizon: f64,
    interval: f64,
    dt: f64,
    rng: &mut SimRng,
) -> Result<Vec<f64>, DiffusionError> {
    let count = (horizon / interval).floor() as usize;
    let mut out = Vec::with_capacity(count);
    let mut x = x0;
    for _ in 0..count {
        match motion.advance(x, interval, dt, rng)? {
            Advance::Alive(next) => {
                x = next;
                out.push(x);
            }
            Advance::Killed { .. } => break,
        }
    }
    Ok(out)
}
