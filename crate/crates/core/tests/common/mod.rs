//! Independent reference computations shared by the integration tests.
//!
//! None of these call into the library's numerics: each oracle is a
//! separate method (fixed-point sweep, shooting, eigen series) so that
//! agreement is evidence rather than tautology.

#![allow(dead_code)]

use std::f64::consts::PI;

/// `F(s) = beta (sum_k q_k s^k - s)` by direct summation.
pub fn mechanism(beta: f64, probs: &[f64], s: f64) -> f64 {
    let g: f64 = probs.iter().enumerate().map(|(k, q)| q * s.powi(k as i32)).sum();
    beta * (g - s)
}

/// `F'(s)` by direct summation.
pub fn mechanism_derivative(beta: f64, probs: &[f64], s: f64) -> f64 {
    let g1: f64 = probs.iter().enumerate().skip(1).map(|(k, q)| q * k as f64 * s.powi(k as i32 - 1)).sum();
    beta * (g1 - 1.0)
}

fn thomas(sub: f64, diag: f64, sup: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup / diag;
    d[0] = rhs[0] / diag;
    for i in 1..n {
        let m = diag - sub * c[i - 1];
        c[i] = sup / m;
        d[i] = (rhs[i] - sub * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Survival profile at the `n + 2` nodes of the uniform grid on `[0, K]`,
/// by the monotone fixed-point sweep
/// ```text
/// (1/2 D² - mu D - c) p_new = F(1 - p_old) - c p_old,   c = beta + (m - 1) beta
/// ```
/// started from the supersolution `p = 1`. The sweep decreases to the
/// maximal solution, which is the survival probability.
pub fn picard_profile(mu: f64, beta: f64, probs: &[f64], k: f64, n: usize, tol: f64) -> Vec<f64> {
    let h = k / (n + 1) as f64;
    let m: f64 = probs.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
    let c = beta * m.max(1.0);
    let sub = 0.5 / (h * h) + mu / (2.0 * h);
    let sup = 0.5 / (h * h) - mu / (2.0 * h);
    let diag = -1.0 / (h * h) - c;
    let mut p = vec![1.0; n + 2];
    p[0] = 0.0;
    p[n + 1] = 0.0;
    for _ in 0..2_000_000 {
        let rhs: Vec<f64> = (1..=n).map(|i| mechanism(beta, probs, 1.0 - p[i]) - c * p[i]).collect();
        let next = thomas(sub, diag, sup, &rhs);
        let change = next.iter().zip(&p[1..=n]).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        p[1..=n].copy_from_slice(&next);
        if change < tol {
            return p;
        }
    }
    panic!("fixed-point sweep did not converge");
}

/// Survival profile at `steps + 1` equally spaced points by shooting:
/// RK4 on `p'' = 2 mu p' + 2 F(1 - p)` from `p(0) = 0, p'(0) = a`, with `a`
/// bisected until the first return to zero happens exactly at `K`.
pub fn shooting_profile(mu: f64, beta: f64, probs: &[f64], k: f64, steps: usize) -> Vec<f64> {
    let h = k / steps as f64;
    let rhs = |p: f64, q: f64| (q, 2.0 * mu * q + 2.0 * mechanism(beta, probs, 1.0 - p));
    let integrate = |a: f64, keep: bool| -> (bool, Vec<f64>) {
        let (mut p, mut q) = (0.0, a);
        let mut path = if keep { vec![0.0] } else { Vec::new() };
        for _ in 0..steps {
            let (k1p, k1q) = rhs(p, q);
            let (k2p, k2q) = rhs(p + 0.5 * h * k1p, q + 0.5 * h * k1q);
            let (k3p, k3q) = rhs(p + 0.5 * h * k2p, q + 0.5 * h * k2q);
            let (k4p, k4q) = rhs(p + h * k3p, q + h * k3q);
            p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            q += h / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
            if keep {
                path.push(p);
            }
            if !(0.0..1.0).contains(&p) {
                return (p >= 1.0, path);
            }
        }
        (true, path)
    };
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while !integrate(hi, false).0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if integrate(mid, false).0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut path = integrate(lo, true).1;
    path.resize(steps + 1, 0.0);
    path[steps] = 0.0;
    path
}

/// Linear interpolation of node values on a uniform grid over `[0, K]`.
pub fn interp(values: &[f64], k: f64, x: f64) -> f64 {
    let n = values.len() - 1;
    let s = (x / k * n as f64).clamp(0.0, n as f64);
    let i = (s.floor() as usize).min(n - 1);
    let t = s - i as f64;
    values[i] * (1.0 - t) + values[i + 1] * t
}

/// `P_x(tau > t)` for Brownian motion with drift `-mu` killed at 0 and K,
/// by the eigenfunction series with `terms` modes.
pub fn killed_survival(mu: f64, k: f64, x: f64, t: f64, terms: usize) -> f64 {
    let quad = 4000;
    let h = k / quad as f64;
    (1..=terms)
        .map(|n| {
            let w = n as f64 * PI / k;
            let coeff: f64 = (0..quad)
                .map(|j| {
                    let y = (j as f64 + 0.5) * h;
                    (-mu * y).exp() * (w * y).sin()
                })
                .sum::<f64>()
                * h
                * 2.0
                / k;
            let rate = 0.5 * mu * mu + 0.5 * w * w;
            coeff * (mu * x).exp() * (w * x).sin() * (-rate * t).exp()
        })
        .sum()
}

pub fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut c = 1.0;
    for k in 0..=n {
        out.push(c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32));
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    out
}

/// CDF of `(2/K) sin²(pi x/K)`.
pub fn conditioned_cdf(k: f64, x: f64) -> f64 {
    x / k - (2.0 * PI * x / k).sin() / (2.0 * PI)
}

/// Bin probabilities of `bins` equal bins under `cdf` on `[0, K]`.
pub fn bin_probs<F: Fn(f64) -> f64>(k: f64, bins: usize, cdf: F) -> Vec<f64> {
    (0..bins)
        .map(|j| cdf(k * (j + 1) as f64 / bins as f64) - cdf(k * j as f64 / bins as f64))
        .collect()
}

pub fn bin_counts(samples: &[f64], k: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &x in samples {
        counts[((x / k * bins as f64) as usize).min(bins - 1)] += 1;
    }
    counts
}

pub fn dyadic() -> Vec<f64> {
    vec![0.0, 0.0, 1.0]
}
