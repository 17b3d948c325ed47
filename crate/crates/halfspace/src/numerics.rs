//! Small numerical helpers shared by the solvers: finite-difference
//! weights, interpolation, quadrature and least-squares line fits.

use crate::error::{Error, Result};

/// Fornberg's algorithm: weights for derivatives `0..=m` at `x0` from the
/// stencil `xs`. Returns `w[d][j]`.
pub fn fd_weights(x0: f64, xs: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Derivatives `0..=m` at the left end of uniformly sampled data, one-sided.
pub fn left_trace(f: &[f64], dx: f64, m: usize, points: usize) -> Vec<f64> {
    let p = points.min(f.len());
    let xs: Vec<f64> = (0..p).map(|i| i as f64 * dx).collect();
    let w = fd_weights(0.0, &xs, m);
    (0..=m)
        .map(|d| (0..p).map(|j| w[d][j] * f[j]).sum())
        .collect()
}

/// Six-point Lagrange interpolation of uniformly sampled data on
/// `[0, (n-1) dx]`; the stencil is shifted inward near the ends.
pub fn lagrange6(f: &[f64], dx: f64, x: f64) -> f64 {
    let n = f.len();
    let s = x / dx;
    let mut i0 = s.floor() as isize - 2;
    i0 = i0.clamp(0, n as isize - 6);
    let i0 = i0 as usize;
    let mut acc = 0.0;
    for j in 0..6 {
        let xj = (i0 + j) as f64;
        let mut l = 1.0;
        for k in 0..6 {
            if k != j {
                let xk = (i0 + k) as f64;
                l *= (s - xk) / (xj - xk);
            }
        }
        acc += l * f[i0 + j];
    }
    acc
}

/// Index `i` with `xs[i] <= x < xs[i+1]`, clamped to valid cells.
pub fn locate(xs: &[f64], x: f64) -> usize {
    let n = xs.len();
    if x <= xs[0] {
        return 0;
    }
    if x >= xs[n - 1] {
        return n - 2;
    }
    match xs.binary_search_by(|a| a.partial_cmp(&x).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    }
}

/// Cubic Lagrange interpolation on a nonuniform grid (four nearest nodes).
pub fn cubic_weights(xs: &[f64], x: f64) -> ([usize; 4], [f64; 4]) {
    let n = xs.len();
    let i = locate(xs, x);
    let i0 = (i as isize - 1).clamp(0, n as isize - 4) as usize;
    let idx = [i0, i0 + 1, i0 + 2, i0 + 3];
    let mut w = [0.0; 4];
    for j in 0..4 {
        let mut l = 1.0;
        for k in 0..4 {
            if k != j {
                l *= (x - xs[idx[k]]) / (xs[idx[j]] - xs[idx[k]]);
            }
        }
        w[j] = l;
    }
    (idx, w)
}

pub fn trapezoid(xs: &[f64], f: &[f64]) -> f64 {
    xs.windows(2)
        .zip(f.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// `F(x_i) = int_{x_i}^{x_end} f`, trapezoid rule.
pub fn tail_integral(xs: &[f64], f: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut out = vec![0.0; n];
    for i in (0..n - 1).rev() {
        out[i] = out[i + 1] + 0.5 * (xs[i + 1] - xs[i]) * (f[i] + f[i + 1]);
    }
    out
}

/// Least-squares line `y = a + b x` with the standard error of `b`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::Fit(format!("need at least two points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        intercept,
        slope,
        slope_stderr,
    })
}

/// Slope of `log y` against `log x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Fit("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

/// Smooth cutoff: 1 on `[0, 1]`, 0 on `[2, inf)`, `C^2` quintic blend.
pub fn cutoff(s: f64) -> f64 {
    if s <= 1.0 {
        1.0
    } else if s >= 2.0 {
        0.0
    } else {
        let t = s - 1.0;
        1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

pub fn cutoff_prime(s: f64) -> f64 {
    if s <= 1.0 || s >= 2.0 {
        0.0
    } else {
        let t = s - 1.0;
        -30.0 * t * t * (1.0 - t) * (1.0 - t)
    }
}

/// Tridiagonal solve (Thomas); `a` sub, `b` main, `c` super diagonal.
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = d[0] / b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = if i < n - 1 { c[i] / m } else { 0.0 };
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_weights_central_second_derivative() {
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert_eq!(w[2], vec![1.0, -2.0, 1.0]);
        assert!((w[1][0] + 0.5).abs() < 1e-15 && (w[1][2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn left_trace_of_polynomial() {
        let dx = 0.1;
        let f: Vec<f64> = (0..8).map(|i| {
            let x = i as f64 * dx;
            1.0 + 2.0 * x - 3.0 * x * x + x.powi(5)
        })
        .collect();
        let t = left_trace(&f, dx, 2, 7);
        assert!((t[0] - 1.0).abs() < 1e-12);
        assert!((t[1] - 2.0).abs() < 1e-10);
        assert!((t[2] + 6.0).abs() < 1e-8);
    }

    #[test]
    fn lagrange_exact_for_quintics() {
        let dx = 0.2;
        let p = |x: f64| x.powi(5) - x * x + 0.5;
        let f: Vec<f64> = (0..12).map(|i| p(i as f64 * dx)).collect();
        for &x in &[0.0, 0.05, 0.77, 1.3, 2.2] {
            assert!((lagrange6(&f, dx, x) - p(x)).abs() < 1e-11);
        }
    }

    #[test]
    fn cubic_weights_reproduce_cubics() {
        let xs = [0.0, 0.1, 0.25, 0.5, 0.9, 1.4];
        let p = |x: f64| 2.0 * x * x * x - x + 1.0;
        for &x in &[0.0, 0.05, 0.3, 0.95, 1.4] {
            let (i, w) = cubic_weights(&xs, x);
            let v: f64 = (0..4).map(|j| w[j] * p(xs[i[j]])).sum();
            assert!((v - p(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_half_slope() {
        let f = loglog_fit(&[0.04, 0.01, 0.0025], &[0.2, 0.1, 0.05]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!(f.slope_stderr < 1e-12);
        assert!(fit_line(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(cutoff(0.5), 1.0);
        assert_eq!(cutoff(2.5), 0.0);
        assert!((cutoff(1.5) - 0.5).abs() < 1e-15);
        assert_eq!(cutoff_prime(0.0), 0.0);
    }

    #[test]
    fn thomas_matches_dense() {
        let a = [0.0, -1.0, -1.0, -1.0];
        let b = [4.0, 4.0, 4.0, 4.0];
        let c = [-1.0, -1.0, -1.0, 0.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        let d: Vec<f64> = (0..4)
            .map(|i| {
                b[i] * x[i]
                    + if i > 0 { a[i] * x[i - 1] } else { 0.0 }
                    + if i < 3 { c[i] * x[i + 1] } else { 0.0 }
            })
            .collect();
        let y = solve_tridiagonal(&a, &b, &c, &d);
        for i in 0..4 {
            assert!((y[i] - x[i]).abs() < 1e-13);
        }
    }
}
