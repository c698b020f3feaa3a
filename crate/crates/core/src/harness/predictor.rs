//! Error bounds of the strong and weak rate theorems, as sums of powers of ε
//! for a power-law schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Regime, ScaleSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateKind {
    Strong,
    Weak,
}

impl std::fmt::Display for RateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RateKind::Strong => "strong",
            RateKind::Weak => "weak",
        })
    }
}

/// One term `ε^exponent` of a bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTerm {
    pub label: String,
    pub exponent: f64,
}

/// Message used when a strong rate is requested for a regime whose averaged
/// equation carries `H̄`.
pub const STRONG_REJECTION: &str = "no strong averaged equation with H̄ exists: the scalings it needs \
(gamma/beta -> 0 with eta = gamma^2, resp. eta = gamma^2 = gamma*beta) force alpha2 out of (1, 2) and \
\"leads to contradictions again\"; use kind = weak";

/// Terms of the bound for `(regime, kind)`. `v` is the Hölder order of the
/// coefficients in `x`.
pub fn predictor_terms(
    regime: Regime,
    kind: RateKind,
    alpha1: f64,
    alpha2: f64,
    v: f64,
    schedule: &ScaleSchedule,
) -> Result<Vec<PredictorTerm>> {
    if kind == RateKind::Strong && matches!(regime, Regime::R3 | Regime::R4) {
        return Err(Error::Regime(format!("{regime} strong: {STRONG_REJECTION}")));
    }
    let (e, g, b) = (schedule.e, schedule.g, schedule.bexp);
    let term = |label: &str, exponent: f64| PredictorTerm { label: label.into(), exponent };
    match regime {
        Regime::R1 | Regime::R2 => {
            let lo = (alpha1 - alpha2).max(0.0);
            if !(v > lo && v <= alpha1) {
                return Err(Error::Parameter(format!("v = {v} outside ({lo}, alpha1 = {alpha1}]")));
            }
            let third = match kind {
                RateKind::Strong => (v / alpha2).min(1.0 - 1f64.max(alpha1 - v) / alpha2),
                RateKind::Weak => (v / alpha2).min(1.0 - (alpha1 - v) / alpha2),
            };
            let mut t = vec![
                term("eta^(1-(1-(1^v))/alpha2)/gamma^2", e * (1.0 - (1.0 - v.min(1.0)) / alpha2) - 2.0 * g),
                term("eta^[...]/gamma", e * third - g),
            ];
            if regime == Regime::R1 {
                t.insert(0, term("eta/(gamma*beta)", e - g - b));
            } else {
                t.push(term("gamma", g));
            }
            Ok(t)
        }
        Regime::R3 | Regime::R4 => {
            let lo = (alpha2 / 2.0).max((2.0 * alpha1 - alpha2) / 2.0);
            if !(v > lo && v <= alpha1) {
                return Err(Error::Parameter(format!("v = {v} outside ({lo}, alpha1 = {alpha1}]")));
            }
            let bracket = 1f64.max(2.0 * alpha1 / alpha2 - 1.0);
            let mut t = vec![term("gamma^(2v/alpha2-[1v(2alpha1/alpha2-1)])", g * (2.0 * v / alpha2 - bracket))];
            if regime == Regime::R3 {
                t.push(term("gamma/beta", g - b));
            }
            Ok(t)
        }
    }
}

/// Value of the bound at `ε`: the largest of its terms (unit constants).
pub fn theoretical_predictor(
    regime: Regime,
    kind: RateKind,
    alpha1: f64,
    alpha2: f64,
    v: f64,
    schedule: &ScaleSchedule,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let terms = predictor_terms(regime, kind, alpha1, alpha2, v, schedule)?;
    Ok(terms.iter().map(|t| eps.powf(t.exponent)).fold(f64::NEG_INFINITY, f64::max))
}

/// Exponent of the dominant term over a grid: the term largest at the
/// smallest ε, ties going to the smaller exponent.
pub fn predictor_slope(
    regime: Regime,
    kind: RateKind,
    alpha1: f64,
    alpha2: f64,
    v: f64,
    schedule: &ScaleSchedule,
    eps_grid: &[f64],
) -> Result<f64> {
    let terms = predictor_terms(regime, kind, alpha1, alpha2, v, schedule)?;
    let eps_min = eps_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(eps_min > 0.0) {
        return Err(Error::Argument("eps grid must be nonempty and positive".into()));
    }
    let mut best = &terms[0];
    for t in &terms[1..] {
        let (vt, vb) = (eps_min.powf(t.exponent), eps_min.powf(best.exponent));
        if vt > vb * (1.0 + 1e-12) || ((vt - vb).abs() <= 1e-12 * vb && t.exponent < best.exponent) {
            best = t;
        }
    }
    Ok(best.exponent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_schedule;

    fn sched(r: Regime, e: f64, g: f64, b: f64) -> ScaleSchedule {
        make_schedule(r, e, g, b, 1.5, 1.5).unwrap()
    }

    #[test]
    fn regime1_strong_value_and_slope() {
        let s = sched(Regime::R1, 1.0, 0.125, 0.5);
        let v = theoretical_predictor(Regime::R1, RateKind::Strong, 1.5, 1.5, 1.5, &s, 2f64.powi(-6)).unwrap();
        assert!((v - 2f64.powf(-1.25)).abs() < 1e-12);
        let grid: Vec<f64> = (3..=8).map(|k| 2f64.powi(-k)).collect();
        let slope = predictor_slope(Regime::R1, RateKind::Strong, 1.5, 1.5, 1.5, &s, &grid).unwrap();
        assert!((slope - 5.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn regime4_weak_is_gamma() {
        let s = sched(Regime::R4, 1.0, 0.5, 0.5);
        for &eps in &[0.1, 0.01] {
            let v = theoretical_predictor(Regime::R4, RateKind::Weak, 1.5, 1.5, 1.5, &s, eps).unwrap();
            assert!((v - s.gamma(eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn regime3_weak_dominant_is_gamma_over_beta() {
        let s = sched(Regime::R3, 1.0, 0.5, 0.25);
        let slope = predictor_slope(Regime::R3, RateKind::Weak, 1.5, 1.5, 1.5, &s, &[0.125, 0.01]).unwrap();
        assert!((slope - 0.25).abs() < 1e-12);
    }

    #[test]
    fn strong_third_term_reduces_to_optimal_order() {
        // v ≥ (α₁ - 1) ∨ (α₂ - 1): bracket is 1 - 1/α₂
        let s = sched(Regime::R1, 1.0, 0.0, 0.5);
        for &v in &[0.6, 1.0, 1.5] {
            let t = predictor_terms(Regime::R1, RateKind::Strong, 1.5, 1.5, v, &s).unwrap();
            let third = t.iter().find(|t| t.label.starts_with("eta^[")).unwrap();
            let expect = (v / 1.5).min(1.0 - 1.0 / 1.5);
            assert!((third.exponent - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejections() {
        let s = sched(Regime::R3, 1.0, 0.5, 0.25);
        for r in [Regime::R3, Regime::R4] {
            let err = predictor_terms(r, RateKind::Strong, 1.5, 1.5, 1.5, &s).unwrap_err();
            assert!(err.to_string().contains("leads to contradictions again"), "{err}");
        }
        assert!(matches!(
            predictor_terms(Regime::R1, RateKind::Weak, 1.5, 1.5, 1.6, &s),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            predictor_terms(Regime::R3, RateKind::Weak, 1.5, 1.5, 0.7, &s),
            Err(Error::Parameter(_))
        ));
    }
}
