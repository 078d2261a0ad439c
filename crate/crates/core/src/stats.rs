//! Test statistics for the Monte Carlo checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Minimum expected (or pooled observed) count per bin for chi-square tests.
pub const MIN_BIN_COUNT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

pub fn mean_stderr(values: &[f64]) -> MeanEstimate {
    let n = values.len();
    if n == 0 {
        return MeanEstimate { mean: 0.0, stderr: 0.0, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    MeanEstimate { mean, stderr: (var / n as f64).sqrt(), n }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Two-sided normal quantile `z` with `P(|Z| > z) = alpha / tests`.
pub fn bonferroni_z(alpha: f64, tests: usize) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf(1.0 - alpha / (2.0 * tests.max(1) as f64))
}

/// Family-wise level matching a single two-sided 3-sigma test.
pub const THREE_SIGMA_ALPHA: f64 = 0.0027;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

impl ChiSquareResult {
    fn new(statistic: f64, df: usize) -> Self {
        let p_value = if df == 0 { 1.0 } else { 1.0 - ChiSquared::new(df as f64).expect("df > 0").cdf(statistic) };
        Self { statistic, df, p_value }
    }

    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Merges adjacent bins (left to right) until each merged bin reaches
/// `MIN_BIN_COUNT` in `weight`; a short last group joins its predecessor.
fn pooled_groups(weight: &[f64]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut acc = 0.0;
    for (i, w) in weight.iter().enumerate() {
        current.push(i);
        acc += w;
        if acc >= MIN_BIN_COUNT {
            groups.push(std::mem::take(&mut current));
            acc = 0.0;
        }
    }
    if !current.is_empty() {
        match groups.last_mut() {
            Some(last) => last.extend(current),
            None => groups.push(current),
        }
    }
    groups
}

/// Pearson goodness of fit of `counts` against bin probabilities `probs`.
pub fn chi_square_gof(counts: &[usize], probs: &[f64]) -> ChiSquareResult {
    let n: usize = counts.iter().sum();
    let expected: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let groups = pooled_groups(&expected);
    let mut stat = 0.0;
    for g in &groups {
        let o: f64 = g.iter().map(|&i| counts[i] as f64).sum();
        let e: f64 = g.iter().map(|&i| expected[i]).sum();
        if e > 0.0 {
            stat += (o - e).powi(2) / e;
        }
    }
    ChiSquareResult::new(stat, groups.len().saturating_sub(1))
}

/// Two-sample chi-square homogeneity test on category counts.
pub fn chi_square_two_sample(a: &[usize], b: &[usize]) -> ChiSquareResult {
    let len = a.len().max(b.len());
    let get = |v: &[usize], i: usize| v.get(i).copied().unwrap_or(0) as f64;
    let na: f64 = a.iter().sum::<usize>() as f64;
    let nb: f64 = b.iter().sum::<usize>() as f64;
    let combined: Vec<f64> = (0..len).map(|i| get(a, i) + get(b, i)).collect();
    let groups = pooled_groups(&combined);
    let (ka, kb) = ((nb / na).sqrt(), (na / nb).sqrt());
    let mut stat = 0.0;
    for g in &groups {
        let r: f64 = g.iter().map(|&i| get(a, i)).sum();
        let s: f64 = g.iter().map(|&i| get(b, i)).sum();
        if r + s > 0.0 {
            stat += (ka * r - kb * s).powi(2) / (r + s);
        }
    }
    ChiSquareResult::new(stat, groups.len().saturating_sub(1))
}

/// Symmetric chi-square distance `sum (p_i - q_i)² / (p_i + q_i)` between
/// the empirical laws of two count vectors, over pooled bins.
pub fn chi_square_distance(a: &[usize], b: &[usize]) -> f64 {
    let len = a.len().max(b.len());
    let get = |v: &[usize], i: usize| v.get(i).copied().unwrap_or(0) as f64;
    let na: f64 = a.iter().sum::<usize>() as f64;
    let nb: f64 = b.iter().sum::<usize>() as f64;
    let combined: Vec<f64> = (0..len).map(|i| get(a, i) + get(b, i)).collect();
    pooled_groups(&combined)
        .iter()
        .map(|g| {
            let p: f64 = g.iter().map(|&i| get(a, i)).sum::<f64>() / na;
            let q: f64 = g.iter().map(|&i| get(b, i)).sum::<f64>() / nb;
            if p + q > 0.0 { (p - q).powi(2) / (p + q) } else { 0.0 }
        })
        .sum()
}

/// Frequencies of the values `0..=max` in `samples`.
pub fn tabulate(samples: &[usize]) -> Vec<usize> {
    let max = samples.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0; max + 1];
    for &s in samples {
        counts[s] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test against the continuous `cdf`.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> KsResult {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    KsResult { statistic: d, p_value: kolmogorov_tail(lambda) }
}

/// `P(K > lambda)` for the Kolmogorov distribution.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
