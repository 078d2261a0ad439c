//! Survival probability of the killed branching diffusion as the solution of
//! the boundary-value problem
//! ```text
//! 1/2 u'' - mu u' + F(u) = 0 on (0, K),   u(0) = u(K) = 1,   u = 1 - p_K
//! ```
//! together with the spatial functions built from `p_K`: the blue-tree
//! growth eigenfunction `f*`, the invariant densities of the blue motion and
//! the quadrature bounds on `lambda(K)`.
//!
//! The ODE is discretized with second-order central differences on a uniform
//! grid and solved with damped Newton (Armijo backtracking). Below `1.5 K0`
//! the nontrivial branch is reached by continuation downward in `K`, since a
//! cold start close to `K0` tends to fall onto `p = 0`.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams};
use crate::numerics::{simpson, solve_tridiagonal};

pub const MIN_GRID_POINTS: usize = 50;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
const DAMPING_FLOOR: f64 = 1.0 / (1u64 << 20) as f64;
const CONTINUATION_START: f64 = 1.5;
const CONTINUATION_STEP: f64 = 0.05;
const PICARD_SWEEPS: usize = 400;
const PICARD_HANDOFF: f64 = 1e-4;
/// Margin above `K0` (relative) beyond which a vanishing solution is an error.
const TRIVIAL_BRANCH_MARGIN: f64 = 1e-3;
/// Below this drift the driftless Green's kernel is used.
const ZERO_DRIFT_THRESHOLD: f64 = 1e-8;
/// Guard on `|p'|` at the boundary for the L'Hôpital limits of `f*`.
const BOUNDARY_SLOPE_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BvpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("grid needs at least {MIN_GRID_POINTS} interior points, got {0}")]
    GridTooSmall(usize),
    #[error("residual tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("Newton failed to converge at K={k} after {iterations} iterations (residual {residual:e})")]
    NonConvergence { k: f64, iterations: usize, residual: f64 },
    #[error("solver fell onto the trivial branch at K={k} (K0={k0}); use a finer continuation")]
    TrivialBranch { k: f64, k0: f64 },
    #[error("solver reached a sign-changing solution at K={k}")]
    SignChangingBranch { k: f64 },
    #[error("operation needs a nontrivial survival profile")]
    TrivialProfile,
    #[error("degenerate profile: boundary slope {0:e} too small")]
    DegenerateBoundarySlope(f64),
    #[error("profile file: {0}")]
    Io(#[from] io::Error),
    #[error("profile CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("profile sidecar: {0}")]
    Json(#[from] serde_json::Error),
    #[error("profile files are inconsistent: {0}")]
    Inconsistent(String),
}

/// Uniform grid `0 = x_0 < x_1 < ... < x_{n+1} = K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    k: f64,
    n: usize,
}

impl Grid {
    pub fn new(k: f64, n: usize) -> Result<Self, BvpError> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(ModelError::InvalidWidth(k).into());
        }
        if n < MIN_GRID_POINTS {
            return Err(BvpError::GridTooSmall(n));
        }
        Ok(Self { k, n })
    }

    pub fn width(&self) -> f64 {
        self.k
    }

    /// Number of interior nodes.
    pub fn interior(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.k / (self.n + 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n + 1 {
            self.k
        } else {
            i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }
}

/// Values of a spatial function at the grid nodes, linearly interpolated
/// in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFunction {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
}

impl NodeFunction {
    pub fn at(&self, x: f64) -> f64 {
        let n = self.x.len();
        let h = self.x[1] - self.x[0];
        let t = ((x - self.x[0]) / h).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        let w = t - i as f64;
        (1.0 - w) * self.values[i] + w * self.values[i + 1]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Simpson integral over the node range.
    pub fn integral(&self) -> f64 {
        simpson(&self.values, self.x[1] - self.x[0])
    }
}

/// Which argument `asymptotic_ratio` compares at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RatioConvention {
    /// Node `x` of `(0, K)` is compared with the sine profile at `x K0 / K`.
    #[default]
    Relative,
    /// Nodes `x < K0` are compared with the sine profile at `x` itself.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iterations: usize,
}

/// Grid-discretized `p_K` with its derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalProfile {
    pub grid: Grid,
    pub p: Vec<f64>,
    pub dp: Vec<f64>,
    pub params: ModelParams,
    pub residual_norm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    params: ModelParams,
    k: f64,
    n: usize,
    residual_norm: f64,
}

/// Discrete residual of `1/2 p'' - mu p' - F(1-p)` at the interior nodes.
fn residual(params: &ModelParams, h: f64, p: &[f64], out: &mut [f64]) {
    let n = out.len();
    let inv_h2 = 0.5 / (h * h);
    let adv = params.mu / (2.0 * h);
    for i in 1..=n {
        let (l, c, r) = (p[i - 1], p[i], p[i + 1]);
        out[i - 1] = inv_h2 * (r - 2.0 * c + l) - adv * (r - l) - params.mechanism(1.0 - c);
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Size of the floating-point noise in the discrete second difference,
/// below which no tolerance can be met on a fine grid.
fn roundoff_floor(p: &[f64], h: f64) -> f64 {
    4.0 * f64::EPSILON * max_abs(p) / (h * h)
}

/// Damped Newton from `guess` (full node vector with zero boundary values).
fn newton(params: &ModelParams, grid: &Grid, mut p: Vec<f64>, opts: &SolverOptions) -> Result<(Vec<f64>, f64), BvpError> {
    let n = grid.interior();
    let h = grid.spacing();
    let inv_h2 = 0.5 / (h * h);
    let adv = params.mu / (2.0 * h);
    let mut res = vec![0.0; n];
    let mut trial_res = vec![0.0; n];
    let mut trial = p.clone();
    let lower = vec![inv_h2 + adv; n];
    let upper = vec![inv_h2 - adv; n];
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    residual(params, h, &p, &mut res);
    let mut norm = l2(&res);
    for iteration in 0..opts.max_iterations {
        let max_res = max_abs(&res);
        if max_res <= opts.tol.max(roundoff_floor(&p, h)) {
            return Ok((p, max_res));
        }
        for i in 0..n {
            diag[i] = -2.0 * inv_h2 + params.mechanism_derivative(1.0 - p[i + 1]);
            rhs[i] = -res[i];
        }
        let delta = solve_tridiagonal(&lower, &diag, &upper, &rhs).ok_or(BvpError::NonConvergence {
            k: grid.width(),
            iterations: iteration,
            residual: max_res,
        })?;
        let step_size = max_abs(&delta);
        let scale = max_abs(&p).max(1e-300);
        let mut alpha = 1.0;
        loop {
            for i in 0..n {
                trial[i + 1] = p[i + 1] + alpha * delta[i];
            }
            residual(params, h, &trial, &mut trial_res);
            let trial_norm = l2(&trial_res);
            if trial_norm <= (1.0 - 1e-4 * alpha) * norm || alpha <= DAMPING_FLOOR {
                break;
            }
            alpha *= 0.5;
        }
        std::mem::swap(&mut p, &mut trial);
        std::mem::swap(&mut res, &mut trial_res);
        norm = l2(&res);
        // A full step at round-off size means the discrete solution is reached
        // even if the residual sits at its floating-point floor above `tol`.
        if alpha == 1.0 && step_size <= 1e-13 * scale.max(1e-8) {
            return Ok((p, max_abs(&res)));
        }
    }
    let last = max_abs(&res);
    if last <= opts.tol.max(roundoff_floor(&p, h)) {
        return Ok((p, last));
    }
    Err(BvpError::NonConvergence { k: grid.width(), iterations: opts.max_iterations, residual: last })
}

/// Fourth-order finite-difference derivative, one-sided near the ends.
pub fn derivative_4th_order(p: &[f64], h: f64) -> Vec<f64> {
    let len = p.len();
    let mut dp = vec![0.0; len];
    let c = 1.0 / (12.0 * h);
    for i in 2..len - 2 {
        dp[i] = c * (-p[i + 2] + 8.0 * p[i + 1] - 8.0 * p[i - 1] + p[i - 2]);
    }
    dp[0] = c * (-25.0 * p[0] + 48.0 * p[1] - 36.0 * p[2] + 16.0 * p[3] - 3.0 * p[4]);
    dp[1] = c * (-3.0 * p[0] - 10.0 * p[1] + 18.0 * p[2] - 6.0 * p[3] + p[4]);
    let e = len - 1;
    dp[e] = -c * (-25.0 * p[e] + 48.0 * p[e - 1] - 36.0 * p[e - 2] + 16.0 * p[e - 3] - 3.0 * p[e - 4]);
    dp[e - 1] = -c * (-3.0 * p[e] - 10.0 * p[e - 1] + 18.0 * p[e - 2] - 6.0 * p[e - 3] + p[e - 4]);
    dp
}

/// Starting point on the maximal branch: a few sweeps of the monotone
/// iteration `(c - L) p_{j+1} = c p_j - F(1 - p_j)` from the supersolution
/// `p = 1 - s*`, where `s*` is the extinction probability without killing.
fn initial_guess(params: &ModelParams, grid: &Grid) -> Vec<f64> {
    let n = grid.interior();
    let h = grid.spacing();
    let c = params.beta;
    let inv_h2 = 0.5 / (h * h);
    let adv = params.mu / (2.0 * h);
    let lower = vec![-(inv_h2 + adv); n];
    let upper = vec![-(inv_h2 - adv); n];
    let diag = vec![2.0 * inv_h2 + c; n];
    let mut p = vec![1.0 - params.gw_extinction_probability(); grid.len()];
    p[0] = 0.0;
    p[n + 1] = 0.0;
    let mut rhs = vec![0.0; n];
    for _ in 0..PICARD_SWEEPS {
        for i in 0..n {
            rhs[i] = c * p[i + 1] - params.mechanism(1.0 - p[i + 1]);
        }
        let next = solve_tridiagonal(&lower, &diag, &upper, &rhs).expect("M-matrix is nonsingular");
        let change = next.iter().zip(&p[1..=n]).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        p[1..=n].copy_from_slice(&next);
        if change < PICARD_HANDOFF {
            break;
        }
    }
    p
}

/// Solves for `p_K` on `n` interior nodes to residual tolerance `tol`.
pub fn solve_survival_profile(params: &ModelParams, k: f64, n: usize, tol: f64) -> Result<SurvivalProfile, BvpError> {
    solve_with_options(params, k, n, SolverOptions { tol, max_iterations: MAX_NEWTON_ITERATIONS })
}

pub fn solve_with_options(params: &ModelParams, k: f64, n: usize, opts: SolverOptions) -> Result<SurvivalProfile, BvpError> {
    params.validate()?;
    let grid = Grid::new(k, n)?;
    if !(opts.tol > 0.0) {
        return Err(BvpError::InvalidTolerance(opts.tol));
    }
    let k0 = match params.critical_width() {
        Some(k0) if k > k0 && params.mean_offspring() > 1.0 => k0,
        _ => return Ok(SurvivalProfile::trivial(params.clone(), grid)),
    };

    let p = if k >= CONTINUATION_START * k0 {
        newton(params, &grid, initial_guess(params, &grid), &opts)?.0
    } else {
        // continuation from 1.5 K0 down to K on the same relative node set
        let span = CONTINUATION_START * k0 - k;
        let steps = (span / (CONTINUATION_STEP * k0)).ceil().max(1.0) as usize;
        let start = Grid::new(CONTINUATION_START * k0, n)?;
        let mut current = newton(params, &start, initial_guess(params, &start), &opts)?.0;
        for j in 1..=steps {
            let kj = CONTINUATION_START * k0 - span * j as f64 / steps as f64;
            let gj = Grid::new(kj, n)?;
            current = newton(params, &gj, current, &opts)?.0;
        }
        current
    };
    let (p, residual_norm) = {
        let (p, r) = newton(params, &grid, p, &opts)?;
        (p, r)
    };
    if max_abs(&p) < 1e-10 && k > k0 * (1.0 + TRIVIAL_BRANCH_MARGIN) {
        return Err(BvpError::TrivialBranch { k, k0 });
    }
    if p[1..=n].iter().any(|&v| v <= 0.0) && max_abs(&p) >= 1e-10 {
        return Err(BvpError::SignChangingBranch { k });
    }
    Ok(SurvivalProfile::from_nodes(params.clone(), grid, p, residual_norm))
}

/// Solves from a caller-supplied interior guess without continuation.
pub fn solve_from_guess(
    params: &ModelParams,
    k: f64,
    guess: &[f64],
    tol: f64,
) -> Result<SurvivalProfile, BvpError> {
    let grid = Grid::new(k, guess.len().saturating_sub(2))?;
    let mut start = guess.to_vec();
    start[0] = 0.0;
    *start.last_mut().unwrap() = 0.0;
    let (p, r) = newton(params, &grid, start, &SolverOptions { tol, max_iterations: MAX_NEWTON_ITERATIONS })?;
    Ok(SurvivalProfile::from_nodes(params.clone(), grid, p, r))
}

/// Green's kernel of `1/2 d²/dx² - mu d/dx` on `(0, K)` with zero boundary
/// values, so that `v(x) = int G(x, y) f(y) dy` solves `Lv = -f`:
/// ```text
/// G(x, y) = W(x) W(K-y) / W(K) - W(x-y) 1{y < x}
/// ```
pub fn green_kernel(mu: f64, k: f64, x: f64, y: f64) -> f64 {
    if mu.abs() < ZERO_DRIFT_THRESHOLD {
        green_kernel_driftless(k, x, y)
    } else {
        green_kernel_drifted(mu, k, x, y)
    }
}

pub fn green_kernel_driftless(k: f64, x: f64, y: f64) -> f64 {
    2.0 * x.min(y) * (k - x.max(y)) / k
}

pub fn green_kernel_drifted(mu: f64, k: f64, x: f64, y: f64) -> f64 {
    // scale function W(z) = (e^{2 mu z} - 1)/mu of the drift -mu motion
    let w = |z: f64| (2.0 * mu * z).exp_m1() / mu;
    let first = w(x) * (2.0 * mu * (k - y)).exp_m1() / (2.0 * mu * k).exp_m1();
    let second = if y < x { w(x - y) } else { 0.0 };
    first - second
}

impl SurvivalProfile {
    fn trivial(params: ModelParams, grid: Grid) -> Self {
        let len = grid.len();
        Self { grid, p: vec![0.0; len], dp: vec![0.0; len], params, residual_norm: 0.0 }
    }

    fn from_nodes(params: ModelParams, grid: Grid, mut p: Vec<f64>, residual_norm: f64) -> Self {
        p[0] = 0.0;
        let last = p.len() - 1;
        p[last] = 0.0;
        let dp = derivative_4th_order(&p, grid.spacing());
        Self { grid, p, dp, params, residual_norm }
    }

    pub fn width(&self) -> f64 {
        self.grid.width()
    }

    pub fn spacing(&self) -> f64 {
        self.grid.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        self.grid.nodes()
    }

    pub fn is_trivial(&self) -> bool {
        self.p.iter().all(|&v| v == 0.0)
    }

    fn require_nontrivial(&self) -> Result<(), BvpError> {
        if self.is_trivial() {
            Err(BvpError::TrivialProfile)
        } else {
            Ok(())
        }
    }

    pub fn max_abs_dp(&self) -> f64 {
        max_abs(&self.dp)
    }

    pub fn max_p(&self) -> f64 {
        self.p.iter().copied().fold(0.0, f64::max)
    }

    /// Interpolated value nearest the strip midpoint.
    pub fn midpoint_value(&self) -> f64 {
        self.p_at(0.5 * self.width())
    }

    /// Recomputes the max-norm of the discrete residual.
    pub fn discrete_residual(&self) -> f64 {
        let mut r = vec![0.0; self.grid.interior()];
        residual(&self.params, self.spacing(), &self.p, &mut r);
        max_abs(&r)
    }

    fn cell(&self, x: f64) -> (usize, f64) {
        let h = self.spacing();
        let t = (x / h).clamp(0.0, (self.grid.len() - 1) as f64);
        let i = (t.floor() as usize).min(self.grid.len() - 2);
        (i, t - i as f64)
    }

    /// `p_K(x)` by monotone cubic Hermite interpolation (Fritsch-Carlson
    /// limited slopes).
    pub fn p_at(&self, x: f64) -> f64 {
        let h = self.spacing();
        let (i, t) = self.cell(x);
        let (y0, y1) = (self.p[i], self.p[i + 1]);
        let secant = (y1 - y0) / h;
        let (mut m0, mut m1) = (self.dp[i], self.dp[i + 1]);
        if secant == 0.0 {
            m0 = 0.0;
            m1 = 0.0;
        } else {
            if m0 * secant < 0.0 {
                m0 = 0.0;
            }
            if m1 * secant < 0.0 {
                m1 = 0.0;
            }
            let a = m0 / secant;
            let b = m1 / secant;
            let r2 = a * a + b * b;
            if r2 > 9.0 {
                let tau = 3.0 / r2.sqrt();
                m0 = tau * a * secant;
                m1 = tau * b * secant;
            }
        }
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1
    }

    /// `p_K'(x)` by linear interpolation of the node derivatives.
    pub fn dp_at(&self, x: f64) -> f64 {
        let (i, t) = self.cell(x);
        (1.0 - t) * self.dp[i] + t * self.dp[i + 1]
    }

    /// `p_K(x) / (C_K sin(pi x'/K0) e^{mu x'})` at interior nodes, where `x'`
    /// follows `convention`.
    pub fn asymptotic_ratio(&self, convention: RatioConvention) -> Result<NodeFunction, BvpError> {
        self.require_nontrivial()?;
        let k = self.width();
        let c_k = self.params.asymptotic_constant(k)?;
        let k0 = self.params.critical_width().ok_or(BvpError::TrivialProfile)?;
        let nodes = self.nodes();
        let mut xs = Vec::new();
        let mut ratios = Vec::new();
        for (i, &x) in nodes.iter().enumerate().take(nodes.len() - 1).skip(1) {
            let (arg, value) = match convention {
                RatioConvention::Relative => (x * k0 / k, self.p[i]),
                RatioConvention::Absolute => {
                    if x >= k0 {
                        break;
                    }
                    (x, self.p[i])
                }
            };
            xs.push(x);
            ratios.push(value / (c_k * (PI * arg / k0).sin() * (self.params.mu * arg).exp()));
        }
        Ok(NodeFunction { x: xs, values: ratios })
    }

    /// Ratio at the strip midpoint under `convention`: `K/2` for the relative
    /// convention, `K0/2` for the absolute one.
    pub fn asymptotic_ratio_midpoint(&self, convention: RatioConvention) -> Result<f64, BvpError> {
        self.require_nontrivial()?;
        let k = self.width();
        let k0 = self.params.critical_width().ok_or(BvpError::TrivialProfile)?;
        let c_k = self.params.asymptotic_constant(k)?;
        let (x, arg) = match convention {
            RatioConvention::Relative => (0.5 * k, 0.5 * k0),
            RatioConvention::Absolute => (0.5 * k0, 0.5 * k0),
        };
        Ok(self.p_at(x) / (c_k * (PI * arg / k0).sin() * (self.params.mu * arg).exp()))
    }

    /// Max-norm discrepancy between `-p_K(x)` and
    /// `int G(x, y) F(1 - p_K(y)) dy`, both evaluated at every node.
    pub fn integral_identity_residual(&self) -> f64 {
        let nodes = self.nodes();
        let h = self.spacing();
        let k = self.width();
        let forcing: Vec<f64> = self.p.iter().map(|&p| self.params.mechanism(1.0 - p)).collect();
        let mut worst = 0.0_f64;
        let mut left = Vec::with_capacity(nodes.len());
        let mut right = Vec::with_capacity(nodes.len());
        for (i, &x) in nodes.iter().enumerate() {
            left.clear();
            right.clear();
            // split at the kink y = x
            for j in 0..=i {
                left.push(green_kernel(self.params.mu, k, x, nodes[j]) * forcing[j]);
            }
            for j in i..nodes.len() {
                right.push(green_kernel(self.params.mu, k, x, nodes[j]) * forcing[j]);
            }
            let rhs = simpson(&left, h) + simpson(&right, h);
            worst = worst.max((rhs + self.p[i]).abs());
        }
        worst
    }

    /// `F^B'(1, y) = (m-1) beta + F(1-p)/p = m beta - beta (1 - G(1-p))/p`,
    /// which tends to 0 where `p -> 0`.
    pub fn fprime_blue_value(&self, p: f64) -> f64 {
        let beta = self.params.beta;
        beta * self.params.mean_offspring() - beta * self.params.offspring.one_minus_pgf_over_p(p)
    }

    pub fn fprime_blue(&self) -> NodeFunction {
        NodeFunction { x: self.nodes(), values: self.p.iter().map(|&p| self.fprime_blue_value(p)).collect() }
    }

    pub fn fprime_blue_at(&self, x: f64) -> f64 {
        self.fprime_blue_value(self.p_at(x))
    }

    /// `Pi^B(y) ∝ p_K(y)² e^{-2 mu y}` normalized by quadrature.
    pub fn invariant_density_blue(&self) -> Result<NodeFunction, BvpError> {
        self.require_nontrivial()?;
        let nodes = self.nodes();
        let raw: Vec<f64> = nodes
            .iter()
            .zip(&self.p)
            .map(|(&x, &p)| p * p * (-2.0 * self.params.mu * x).exp())
            .collect();
        let z = simpson(&raw, self.spacing());
        Ok(NodeFunction { x: nodes, values: raw.iter().map(|v| v / z).collect() })
    }

    /// `Pi^{B,*}(y) = (2/K) sin²(pi y / K)`.
    pub fn invariant_density_star(&self, y: f64) -> f64 {
        conditioned_density(self.width(), y)
    }

    pub fn invariant_densities(&self) -> Result<(NodeFunction, NodeFunction), BvpError> {
        let blue = self.invariant_density_blue()?;
        let star = NodeFunction {
            x: blue.x.clone(),
            values: blue.x.iter().map(|&y| self.invariant_density_star(y)).collect(),
        };
        Ok((blue, star))
    }

    /// `f*(x) ∝ sin(pi x/K) e^{mu x} / p_K(x)`, normalized so that
    /// `int f*² Pi^B = 1`; boundary values are the L'Hôpital limits.
    pub fn eigenfunction_fstar(&self) -> Result<NodeFunction, BvpError> {
        self.require_nontrivial()?;
        let k = self.width();
        let mu = self.params.mu;
        let last = self.dp.len() - 1;
        for slope in [self.dp[0], self.dp[last]] {
            if slope.abs() < BOUNDARY_SLOPE_GUARD {
                return Err(BvpError::DegenerateBoundarySlope(slope));
            }
        }
        let nodes = self.nodes();
        let mut raw: Vec<f64> = nodes
            .iter()
            .zip(&self.p)
            .map(|(&x, &p)| (PI * x / k).sin() * (mu * x).exp() / p)
            .collect();
        raw[0] = (PI / k) / self.dp[0];
        raw[last] = (PI / k) * (mu * k).exp() / (-self.dp[last]);
        let blue = self.invariant_density_blue()?;
        let weighted: Vec<f64> = raw.iter().zip(&blue.values).map(|(f, w)| f * f * w).collect();
        let norm = simpson(&weighted, self.spacing()).sqrt();
        Ok(NodeFunction { x: nodes, values: raw.iter().map(|f| f / norm).collect() })
    }

    /// Max-norm over interior nodes of `(L^B + F^B'(1,.) - lambda(K)) f`,
    /// with `L^B = 1/2 d²/dx² - (mu - p'/p) d/dx` discretized centrally.
    pub fn eigen_residual(&self, f: &NodeFunction) -> f64 {
        let h = self.spacing();
        let lambda = self.params.lambda_unchecked(self.width());
        let mut worst = 0.0_f64;
        for i in 1..self.p.len() - 1 {
            let drift = -self.params.mu + self.dp[i] / self.p[i];
            let v = &f.values;
            let lap = 0.5 * (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h);
            let grad = (v[i + 1] - v[i - 1]) / (2.0 * h);
            let r = lap + drift * grad + (self.fprime_blue_value(self.p[i]) - lambda) * v[i];
            worst = worst.max(r.abs());
        }
        worst
    }

    /// `(int F^B' Pi^B, int F^B' Pi^{B,*})`, which bracket `lambda(K)`.
    pub fn lambda_bounds(&self) -> LambdaBounds {
        if self.is_trivial() {
            return LambdaBounds { lower: 0.0, upper: 0.0 };
        }
        let h = self.spacing();
        let fb = self.fprime_blue();
        let blue = self.invariant_density_blue().expect("nontrivial profile");
        let lower: Vec<f64> = fb.values.iter().zip(&blue.values).map(|(a, b)| a * b).collect();
        let upper: Vec<f64> = fb
            .values
            .iter()
            .zip(&fb.x)
            .map(|(a, &y)| a * self.invariant_density_star(y))
            .collect();
        LambdaBounds { lower: simpson(&lower, h), upper: simpson(&upper, h) }
    }

    /// Writes `x,p,dp` rows to `csv_path` and the parameters to `json_path`.
    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<(), BvpError> {
        let mut writer = csv::Writer::from_path(csv_path)?;
        writer.write_record(["x", "p", "dp"])?;
        for ((x, p), dp) in self.nodes().iter().zip(&self.p).zip(&self.dp) {
            writer.serialize((x, p, dp))?;
        }
        writer.flush()?;
        let sidecar = Sidecar {
            params: self.params.clone(),
            k: self.width(),
            n: self.grid.interior(),
            residual_norm: self.residual_norm,
        };
        fs::write(json_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(csv_path: &Path, json_path: &Path) -> Result<Self, BvpError> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        let grid = Grid::new(sidecar.k, sidecar.n)?;
        let mut reader = csv::Reader::from_path(csv_path)?;
        let mut p = Vec::with_capacity(grid.len());
        let mut dp = Vec::with_capacity(grid.len());
        for row in reader.deserialize() {
            let (_x, pv, dv): (f64, f64, f64) = row?;
            p.push(pv);
            dp.push(dv);
        }
        if p.len() != grid.len() {
            return Err(BvpError::Inconsistent(format!("{} rows for {} nodes", p.len(), grid.len())));
        }
        Ok(Self { grid, p, dp, params: sidecar.params, residual_norm: sidecar.residual_norm })
    }
}

/// Stationary density `(2/K) sin²(pi y/K)` of the conditioned motion.
pub fn conditioned_density(k: f64, y: f64) -> f64 {
    let s = (PI * y / k).sin();
    2.0 / k * s * s
}
