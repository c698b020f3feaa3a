//! The fractional Laplacian `-(-Δ)^{α/2} f(y)` in one dimension, in the
//! symmetrized form `c ∫₀^∞ (f(y+z) + f(y-z) - 2 f(y)) z^{-1-α} dz`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::levy_measure_constant;

/// What is known about `f` beyond the outer cut `R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TailModel {
    /// `f(y ± z)` is negligible for `z > R`.
    Decay,
    /// `|f| ≤ sup`; the far part is bounded, not evaluated.
    Bounded { sup: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadParams {
    /// Below this `z` the integrand is replaced by its Taylor term.
    pub inner_cut: f64,
    pub outer_cut: f64,
    pub panels: usize,
    pub tail: TailModel,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self { inner_cut: 1e-3, outer_cut: 50.0, panels: 4096, tail: TailModel::Decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianValue {
    pub value: f64,
    /// Bound on the far-field part left out of `value`.
    pub tail_bound: f64,
}

const GL3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// See [`fractional_laplacian_1d_detailed`].
pub fn fractional_laplacian_1d(f: &dyn Fn(f64) -> f64, y: f64, alpha: f64, p: &QuadParams) -> Result<f64> {
    fractional_laplacian_1d_detailed(f, y, alpha, p).map(|v| v.value)
}

/// Fractional Laplacian with symbol `-|u|^α`; `α = 2` gives `f''`.
pub fn fractional_laplacian_1d_detailed(
    f: &dyn Fn(f64) -> f64,
    y: f64,
    alpha: f64,
    p: &QuadParams,
) -> Result<LaplacianValue> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 2], got {alpha}")));
    }
    if !(p.inner_cut > 0.0 && p.outer_cut > p.inner_cut && p.panels > 0) {
        return Err(Error::Argument("need 0 < inner_cut < outer_cut and panels > 0".into()));
    }
    let s = 1e-3;
    let f0 = f(y);
    let f2 = (f(y + s) - 2.0 * f0 + f(y - s)) / (s * s);
    if alpha == 2.0 {
        return finite(f2, "second difference").map(|value| LaplacianValue { value, tail_bound: 0.0 });
    }
    let c = levy_measure_constant(alpha, 1);
    let d = p.inner_cut;
    let mut acc = f2 * d.powf(2.0 - alpha) / (2.0 - alpha);
    let ratio = (p.outer_cut / d).ln() / p.panels as f64;
    for k in 0..p.panels {
        let a = d * (ratio * k as f64).exp();
        let b = d * (ratio * (k + 1) as f64).exp();
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let mut panel = 0.0;
        for (node, w) in GL3 {
            let z = mid + half * node;
            panel += w * (f(y + z) + f(y - z) - 2.0 * f0) * z.powf(-1.0 - alpha);
        }
        let panel = panel * half;
        if !panel.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand on panel [{a}, {b}]")));
        }
        acc += panel;
    }
    let r = p.outer_cut;
    acc -= 2.0 * f0 * r.powf(-alpha) / alpha;
    let tail_bound = match p.tail {
        TailModel::Decay => 0.0,
        TailModel::Bounded { sup } => c * 2.0 * sup * r.powf(-alpha) / alpha,
    };
    Ok(LaplacianValue { value: finite(c * acc, "result")?, tail_bound })
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("fractional Laplacian: non-finite {what}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_is_an_eigenfunction() {
        let p = QuadParams { tail: TailModel::Bounded { sup: 1.0 }, ..QuadParams::default() };
        for &(alpha, k, y) in &[(1.5, 2.0, 0.0), (1.2, 1.0, 0.4), (1.8, 0.5, -1.0)] {
            let v = fractional_laplacian_1d_detailed(&|z: f64| (k * z).cos(), y, alpha, &p).unwrap();
            let exact = -(k as f64).powf(alpha) * (k * y).cos();
            assert!((v.value - exact).abs() < 1e-3 + v.tail_bound, "{alpha} {k} {y}: {} vs {exact}", v.value);
        }
    }

    #[test]
    fn gaussian_limit_and_decay_model() {
        let p = QuadParams::default();
        let g = |z: f64| (-z * z).exp();
        let v2 = fractional_laplacian_1d(&g, 0.3, 2.0, &p).unwrap();
        let exact2 = (4.0 * 0.09 - 2.0) * (-0.09f64).exp();
        assert!((v2 - exact2).abs() < 1e-5);
        // α → 2 continuity
        let v = fractional_laplacian_1d(&g, 0.3, 1.999, &p).unwrap();
        assert!((v - exact2).abs() < 2e-2, "{v} {exact2}");
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = QuadParams::default();
        assert!(fractional_laplacian_1d(&|z: f64| z, 0.0, 2.5, &p).is_err());
        let bad = QuadParams { outer_cut: 1e-4, ..p };
        assert!(fractional_laplacian_1d(&|z: f64| z, 0.0, 1.5, &bad).is_err());
        assert!(matches!(
            fractional_laplacian_1d(&|z: f64| if z > 10.0 { f64::NAN } else { 0.0 }, 0.0, 1.5, &p),
            Err(Error::Numerical(_))
        ));
    }
}
