//! Natural cubic spline on strictly increasing nodes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the nodes.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 3 || ys.len() != n {
            return Err(Error::Argument("spline needs at least 3 nodes and matching values".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("spline nodes must be strictly increasing".into()));
        }
        // tridiagonal system for interior second derivatives (Thomas)
        let mut m = vec![0.0; n];
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut sup = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            diag[i - 1] = 2.0 * (h0 + h1);
            sup[i - 1] = h1;
            rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
        }
        for i in 1..k {
            let sub = xs[i + 1] - xs[i];
            let w = sub / diag[i - 1];
            diag[i] -= w * sup[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (0..k).rev() {
            let next = if i + 1 < k { m[i + 2] } else { 0.0 };
            m[i + 1] = (rhs[i] - sup[i] * next) / diag[i];
        }
        Ok(Self { xs, ys, m })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.xs
    }

    pub fn values(&self) -> &[f64] {
        &self.ys
    }

    fn interval(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.partition_point(|&v| v <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        }
    }

    /// Value, first and second derivative. Outside the nodes the spline is
    /// continued linearly, which keeps it C².
    pub fn eval3(&self, x: f64) -> (f64, f64, f64) {
        let n = self.xs.len();
        if x < self.xs[0] {
            let (_, d, _) = self.eval3(self.xs[0]);
            return (self.ys[0] + d * (x - self.xs[0]), d, 0.0);
        }
        if x > self.xs[n - 1] {
            let (_, d, _) = self.eval3(self.xs[n - 1]);
            return (self.ys[n - 1] + d * (x - self.xs[n - 1]), d, 0.0);
        }
        let i = self.interval(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let v = a * self.ys[i] + b * self.ys[i + 1] + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d = (self.ys[i + 1] - self.ys[i]) / h - (3.0 * a * a - 1.0) * h * m0 / 6.0 + (3.0 * b * b - 1.0) * h * m1 / 6.0;
        let s = a * m0 + b * m1;
        (v, d, s)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval3(x).0
    }

    pub fn deriv(&self, x: f64) -> f64 {
        self.eval3(x).1
    }

    pub fn second(&self, x: f64) -> f64 {
        self.eval3(x).2
    }
}

/// Largest `|f''''|` implied by fourth divided differences over each
/// window of five consecutive nodes; entry `i` covers interval `[x_i, x_{i+1}]`.
pub fn local_fourth_derivative(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    if n < 5 {
        return vec![0.0; n.saturating_sub(1)];
    }
    let mut dd: Vec<f64> = ys.to_vec();
    for order in 1..=4 {
        dd = (0..dd.len() - 1).map(|i| (dd[i + 1] - dd[i]) / (xs[i + order] - xs[i])).collect();
    }
    // dd[j] covers nodes j..j+4; f'''' ≈ 24 dd
    (0..n - 1)
        .map(|i| {
            let lo = i.saturating_sub(3).min(dd.len() - 1);
            let hi = i.min(dd.len() - 1);
            (lo..=hi).map(|j| 24.0 * dd[j].abs()).fold(0.0, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_cubic_interior_and_sine() {
        let xs: Vec<f64> = (0..=60).map(|i| -3.0 + 0.1 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let s = CubicSpline::new(xs, ys).unwrap();
        for &x in &[-1.234, 0.0, 0.77, 2.05] {
            let (v, d, dd) = s.eval3(x);
            assert!((v - x.sin()).abs() < 1e-5);
            assert!((d - x.cos()).abs() < 1e-3);
            assert!((dd + x.sin()).abs() < 2e-2);
        }
    }

    #[test]
    fn linear_data_and_extrapolation() {
        let xs = vec![0.0, 0.5, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let s = CubicSpline::new(xs, ys).unwrap();
        assert!((s.eval(1.3) - 1.6).abs() < 1e-12);
        assert!((s.eval(5.0) - 9.0).abs() < 1e-12);
        assert!((s.eval(-1.0) + 3.0).abs() < 1e-12);
    }

    #[test]
    fn fourth_derivative_of_quartic() {
        let xs: Vec<f64> = (0..20).map(|i| 0.3 * i as f64 + 0.01 * (i * i) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.powi(4)).collect();
        for v in local_fourth_derivative(&xs, &ys) {
            assert!((v - 24.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn rejects_bad_nodes() {
        assert!(CubicSpline::new(vec![0.0, 1.0, 1.0], vec![0.0; 3]).is_err());
        assert!(CubicSpline::new(vec![0.0, 1.0], vec![0.0; 2]).is_err());
    }
}
