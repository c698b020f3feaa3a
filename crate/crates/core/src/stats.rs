//! Small statistical toolbox shared by the estimators: robust means,
//! batch-means standard errors, two-sample tests and log-log regression.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::RngStream;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean of independent samples.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Median; reorders `xs`.
pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median of the per-group arithmetic means, groups taken in sample order.
pub fn median_of_means(samples: &[f64], groups: usize) -> Result<f64> {
    let means = group_means(samples, groups)?;
    let mut means = means;
    Ok(median(&mut means))
}

/// Per-group means used by [`median_of_means`].
pub fn group_means(samples: &[f64], groups: usize) -> Result<Vec<f64>> {
    if groups == 0 {
        return Err(Error::Argument("median_of_means needs at least one group".into()));
    }
    if samples.is_empty() || samples.len() % groups != 0 {
        return Err(Error::Argument(format!(
            "sample count {} is not divisible by group count {groups}",
            samples.len()
        )));
    }
    let size = samples.len() / groups;
    Ok(samples.chunks_exact(size).map(mean).collect())
}

/// Robust spread of a median-of-means estimate: scaled MAD of the group
/// means divided by `√groups`.
pub fn mom_spread(samples: &[f64], groups: usize) -> Result<f64> {
    let mut means = group_means(samples, groups)?;
    if groups == 1 {
        return Ok(standard_error(samples));
    }
    let med = median(&mut means);
    let mut dev: Vec<f64> = means.iter().map(|m| (m - med).abs()).collect();
    let mad = median(&mut dev);
    Ok(1.4826 * mad / (groups as f64).sqrt() * std::f64::consts::FRAC_PI_2.sqrt())
}

/// Standard error of the mean of a correlated series by non-overlapping
/// batch means. Falls back to the naive SE when there are too few samples.
pub fn batch_means_se(xs: &[f64], n_batches: usize) -> f64 {
    let n_batches = n_batches.max(2);
    if xs.len() < 2 * n_batches {
        return standard_error(xs);
    }
    let size = xs.len() / n_batches;
    let means: Vec<f64> = xs.chunks_exact(size).take(n_batches).map(mean).collect();
    (variance(&means) / n_batches as f64).sqrt()
}

/// Effective sample size implied by batch means.
pub fn effective_sample_size(xs: &[f64], n_batches: usize) -> f64 {
    let se = batch_means_se(xs, n_batches);
    let var = variance(xs);
    if se <= 0.0 || var <= 0.0 {
        return xs.len() as f64;
    }
    (var / (se * se)).min(xs.len() as f64)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 1% critical value of the two-sample KS statistic.
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.628 * ((n + m) / (n * m)).sqrt()
}

/// Result of a log-log least-squares fit `log error = intercept + slope log ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Ordinary least squares on `(x, y)` pairs; returns `(slope, intercept, r²)`.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

fn check_rate_inputs(errors: &[f64], eps_grid: &[f64]) -> Result<()> {
    if errors.len() != eps_grid.len() {
        return Err(Error::Argument(format!(
            "{} errors for {} grid points",
            errors.len(),
            eps_grid.len()
        )));
    }
    if errors.len() < 3 {
        return Err(Error::Argument("rate fit needs at least 3 grid points".into()));
    }
    if let Some((i, e)) = errors.iter().enumerate().find(|(_, e)| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::Argument(format!(
            "error entry {i} is {e}; nonpositive errors usually mean the coupled and averaged paths coincide"
        )));
    }
    if eps_grid.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Argument("eps grid must be positive".into()));
    }
    Ok(())
}

/// Log-log rate fit without replicate data; the CI collapses to the slope.
pub fn fit_rate(errors: &[f64], eps_grid: &[f64]) -> Result<RateFit> {
    check_rate_inputs(errors, eps_grid)?;
    let lx: Vec<f64> = eps_grid.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (slope, intercept, r2) = ols(&lx, &ly);
    Ok(RateFit { slope, intercept, r2, ci_low: slope, ci_high: slope })
}

/// Log-log rate fit with a percentile bootstrap over replicates.
///
/// `replicates[i]` holds the replicate-level data at `eps_grid[i]` and
/// `aggregate` maps a resampled replicate set to the error statistic.
pub fn fit_rate_bootstrap<T, F>(
    errors: &[f64],
    eps_grid: &[f64],
    replicates: &[Vec<T>],
    aggregate: F,
    n_boot: usize,
    stream: RngStream,
) -> Result<RateFit>
where
    T: Clone,
    F: Fn(&[T]) -> Result<f64>,
{
    let mut fit = fit_rate(errors, eps_grid)?;
    if replicates.len() != eps_grid.len() || n_boot == 0 {
        return Ok(fit);
    }
    let lx: Vec<f64> = eps_grid.iter().map(|e| e.ln()).collect();
    let mut rng = stream.rng();
    let mut slopes = Vec::with_capacity(n_boot);
    let mut buf: Vec<T> = Vec::new();
    'boot: for _ in 0..n_boot {
        let mut ly = Vec::with_capacity(lx.len());
        for reps in replicates {
            if reps.is_empty() {
                return Ok(fit);
            }
            buf.clear();
            for _ in 0..reps.len() {
                buf.push(reps[rng.random_range(0..reps.len())].clone());
            }
            let e = aggregate(&buf)?;
            if !(e > 0.0) {
                continue 'boot;
            }
            ly.push(e.ln());
        }
        slopes.push(ols(&lx, &ly).0);
    }
    if slopes.len() >= 10 {
        slopes.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| slopes[((slopes.len() - 1) as f64 * p).round() as usize];
        fit.ci_low = q(0.025);
        fit.ci_high = q(0.975);
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    #[test]
    fn mom_examples() {
        let xs: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(median_of_means(&xs, 3).unwrap(), 5.0);
        assert_eq!(median_of_means(&xs, 1).unwrap(), 5.0);
        assert!(median_of_means(&xs, 2).is_err());
        assert!(median_of_means(&xs, 0).is_err());
    }

    #[test]
    fn mom_beats_plain_mean_on_heavy_tails() {
        use crate::noise::standard_symmetric_stable;
        let mut mom_hits = 0;
        let mut mean_hits = 0;
        for rep in 0..100 {
            let mut rng = RngStream::new(77, rep).rng();
            let xs: Vec<f64> =
                (0..30_000).map(|_| 1.0 + standard_symmetric_stable(1.5, &mut rng)).collect();
            if (median_of_means(&xs, 30).unwrap() - 1.0).abs() < 0.05 {
                mom_hits += 1;
            }
            if (mean(&xs) - 1.0).abs() < 0.05 {
                mean_hits += 1;
            }
        }
        // Each group mean is stable with scale 1000^(-1/3) = 0.1 and density
        // Γ(1+1/α)/(0.1π) at its center, so the median of 30 has sd ≈ 0.0318
        // and lands within 0.05 with probability ≈ 0.884.
        let sd = 1.0 / (2.0 * 30f64.sqrt() * 0.902_745 / (0.1 * std::f64::consts::PI));
        assert!((sd - 0.0318).abs() < 5e-4);
        let binom_sd = (100.0 * 0.884 * 0.116f64).sqrt();
        assert!((mom_hits as f64 - 88.4).abs() <= 3.0 * binom_sd, "mom hits {mom_hits}");
        assert!(mean_hits < mom_hits, "mean hits {mean_hits}");
    }

    #[test]
    fn fit_rate_synthetic() {
        let eps: Vec<f64> = (3..9).map(|k| 2f64.powi(-k)).collect();
        let errs: Vec<f64> = eps.iter().map(|e| e.sqrt()).collect();
        let fit = fit_rate(&errs, &eps).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        let errs2: Vec<f64> = errs.iter().map(|e| 2.0 * e).collect();
        let fit2 = fit_rate(&errs2, &eps).unwrap();
        assert!((fit2.slope - 0.5).abs() < 1e-12);
        assert!((fit2.intercept - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fit_rate_perturbation_sensitivity() {
        let eps: Vec<f64> = (3..9).map(|k| 2f64.powi(-k)).collect();
        // Closed form: perturbing entry i by log(1.2) moves the slope by
        // (x_i - x̄) log 1.2 / Sxx; the worst entry sits at an end of the grid.
        let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
        let mx = mean(&lx);
        let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
        for i in 0..eps.len() {
            let mut errs: Vec<f64> = eps.iter().map(|e| e.sqrt()).collect();
            errs[i] *= 1.2;
            let fit = fit_rate(&errs, &eps).unwrap();
            let predicted = 0.5 + (lx[i] - mx) * 1.2f64.ln() / sxx;
            assert!((fit.slope - predicted).abs() < 1e-12);
            assert!((fit.slope - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn fit_rate_rejects_bad_input() {
        let eps = [0.5, 0.25, 0.125];
        assert!(fit_rate(&[1.0, 0.0, 0.5], &eps).is_err());
        assert!(fit_rate(&[1.0, 0.5], &eps[..2]).is_err());
    }

    #[test]
    fn bootstrap_ci_contains_slope() {
        let eps: Vec<f64> = (3..8).map(|k| 2f64.powi(-k)).collect();
        let mut reps = Vec::new();
        let mut errs = Vec::new();
        for (i, e) in eps.iter().enumerate() {
            let mut rng = RngStream::new(5, i as u64).rng();
            let r: Vec<f64> = (0..400).map(|_| e.sqrt() * (0.5 + rng.random::<f64>())).collect();
            errs.push(mean(&r));
            reps.push(r);
        }
        let fit = fit_rate_bootstrap(&errs, &eps, &reps, |s| Ok(mean(s)), 200, RngStream::new(1, 1))
            .unwrap();
        assert!(fit.ci_low <= fit.slope && fit.slope <= fit.ci_high);
        assert!(fit.ci_high - fit.ci_low > 0.0);
    }

    #[test]
    fn batch_means_detects_correlation() {
        // AR(1) with ρ = 0.9: the batch-means SE exceeds the naive SE
        let mut rng = RngStream::new(3, 0).rng();
        let mut x = 0.0;
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                x = 0.9 * x + rng.random::<f64>() - 0.5;
                x
            })
            .collect();
        assert!(batch_means_se(&xs, 50) > 2.0 * standard_error(&xs));
        assert!(effective_sample_size(&xs, 50) < 20_000.0);
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 500.0).collect();
        assert!((ks_two_sample(&a, &b) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mom_lies_within_group_mean_range(xs in proptest::collection::vec(-1e3f64..1e3, 1..20), g in 1usize..5) {
            let xs: Vec<f64> = xs.iter().cycle().take(xs.len() * g).cloned().collect();
            let m = median_of_means(&xs, g).unwrap();
            let means = group_means(&xs, g).unwrap();
            let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
        }

        #[test]
        fn exact_power_laws_are_recovered(k in 0.05f64..2.0, c in 0.1f64..10.0) {
            let eps: Vec<f64> = (2..8).map(|j| 2f64.powi(-j)).collect();
            let errs: Vec<f64> = eps.iter().map(|e| c * e.powf(k)).collect();
            let fit = fit_rate(&errs, &eps).unwrap();
            prop_assert!((fit.slope - k).abs() < 1e-9);
            prop_assert!((fit.intercept - c.ln()).abs() < 1e-9);
        }
    }
}
