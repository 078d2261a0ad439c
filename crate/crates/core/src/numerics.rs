//! Small numerical kernels: composite quadrature on uniform grids and a
//! tridiagonal solver.

/// Composite Simpson rule for samples on a uniform grid with spacing `h`.
/// An odd number of intervals is closed with the 3/8 rule on the last three.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    match n {
        0 | 1 => 0.0,
        2 => 0.5 * h * (values[0] + values[1]),
        3 => h / 3.0 * (values[0] + 4.0 * values[1] + values[2]),
        _ => {
            let intervals = n - 1;
            let (even_end, tail) = if intervals.is_multiple_of(2) { (n - 1, false) } else { (n - 4, true) };
            let mut sum = values[0] + values[even_end];
            for (i, v) in values.iter().enumerate().take(even_end).skip(1) {
                sum += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            let mut total = h / 3.0 * sum;
            if tail {
                let v = &values[n - 4..];
                total += 3.0 * h / 8.0 * (v[0] + 3.0 * v[1] + 3.0 * v[2] + v[3]);
            }
            total
        }
    }
}

/// Solves `a_i x_{i-1} + b_i x_i + c_i x_{i+1} = d_i` (Thomas algorithm).
/// `a[0]` and `c[n-1]` are ignored. Returns `None` on a zero pivot.
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut denom = b[0];
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    cp[0] = c[0] / denom;
    dp[0] = d[0] / denom;
    for i in 1..n {
        denom = b[i] - a[i] * cp[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        cp[i] = if i + 1 < n { c[i] / denom } else { 0.0 };
        dp[i] = (d[i] - a[i] * dp[i - 1]) / denom;
    }
    let mut x = dp;
    for i in (0..n - 1).rev() {
        x[i] -= cp[i] * x[i + 1];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_for_cubics_both_parities() {
        for n in [5usize, 6, 11, 12] {
            let h = 2.0 / (n - 1) as f64;
            let v: Vec<f64> = (0..n).map(|i| (i as f64 * h).powi(3) - i as f64 * h).collect();
            // int_0^2 x³ - x dx = 4 - 2
            assert!((simpson(&v, h) - 2.0).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn simpson_converges_for_sine() {
        let n = 1001;
        let h = std::f64::consts::PI / (n - 1) as f64;
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * h).sin()).collect();
        assert!((simpson(&v, h) - 2.0).abs() < 1e-11);
    }

    #[test]
    fn tridiagonal_matches_dense_solution() {
        let a = [0.0, 1.0, 1.0, 1.0];
        let b = [4.0, 4.0, 4.0, 4.0];
        let c = [1.0, 1.0, 1.0, 0.0];
        let x_true = [1.0, -2.0, 3.0, 0.5];
        let d: Vec<f64> = (0..4)
            .map(|i| {
                b[i] * x_true[i]
                    + if i > 0 { a[i] * x_true[i - 1] } else { 0.0 }
                    + if i < 3 { c[i] * x_true[i + 1] } else { 0.0 }
            })
            .collect();
        let x = solve_tridiagonal(&a, &b, &c, &d).unwrap();
        for (u, v) in x.iter().zip(x_true) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}
