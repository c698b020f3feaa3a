//! Invariant-measure sampling and ergodicity diagnostics of the frozen
//! equation `dY = f(x, Y) dt + dL²`.

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{advance_frozen, fit_step, run_coupled_streaming};
use crate::model::{ModelSpec, ScaleSchedule, SineCenter, SineParams};
use crate::noise::RngStream;
use crate::stats;

/// Default burn-in tolerance and ensemble shape.
pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_N: usize = 100_000;
pub const DEFAULT_THIN: usize = 10;

const BATCHES: usize = 30;

/// States of the frozen dynamics at a fixed anchor `x`, sampled after
/// burn-in every `thin` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEnsemble {
    anchor_x: Vec<f64>,
    samples: Array2<f64>,
    pub burn_in: f64,
    pub thin: usize,
    pub h: f64,
    pub chains: usize,
    /// Effective sample size of the first coordinate (batch means).
    pub ess: f64,
}

impl FrozenEnsemble {
    pub fn new(anchor_x: Vec<f64>, samples: Array2<f64>, burn_in: f64, thin: usize, h: f64) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Argument("ensemble must hold at least one sample".into()));
        }
        let first: Vec<f64> = samples.column(0).to_vec();
        let ess = stats::effective_sample_size(&first, BATCHES);
        Ok(Self { anchor_x, samples, burn_in, thin, h, chains: 1, ess })
    }

    pub fn anchor_x(&self) -> &[f64] {
        &self.anchor_x
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.samples.rows().into_iter().map(|r| r.to_slice().expect("standard layout"))
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.samples.row(i).to_slice().expect("standard layout")
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.column(j).to_vec()
    }

    pub fn last(&self) -> &[f64] {
        self.get(self.len() - 1)
    }

    pub fn require_anchor(&self, x: &[f64]) -> Result<()> {
        let same = x.len() == self.anchor_x.len()
            && x.iter().zip(&self.anchor_x).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        if same {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "ensemble anchored at {:?}, requested {:?}",
                self.anchor_x, x
            )))
        }
    }

    /// Ensemble mean and batch-means SE of a scalar observable.
    pub fn average(&self, g: impl Fn(&[f64]) -> f64) -> (f64, f64) {
        let vals: Vec<f64> = self.iter().map(g).collect();
        (shifted_mean(&vals), shifted_se(&vals))
    }

    /// CSV with `#key=value` metadata lines, a header, then one state per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let anchor: Vec<String> = self.anchor_x.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "#anchor_x={}", anchor.join(";"));
        let _ = writeln!(s, "#burn_in={:?}", self.burn_in);
        let _ = writeln!(s, "#thin={}", self.thin);
        let _ = writeln!(s, "#h={:?}", self.h);
        let _ = writeln!(s, "#chains={}", self.chains);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("y{j}")).collect();
        let _ = writeln!(s, "{}", header.join(","));
        for row in self.iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Argument(format!("ensemble csv: {m}"));
        let (mut anchor, mut burn_in, mut thin, mut h, mut chains) = (None, 0.0, 1, 0.0, 1);
        let mut rows: Vec<f64> = Vec::new();
        let mut dim = None;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}")));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(meta) = line.strip_prefix('#') {
                let (k, v) = meta.split_once('=').ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
                match k {
                    "anchor_x" => anchor = Some(v.split(';').map(parse).collect::<Result<Vec<_>>>()?),
                    "burn_in" => burn_in = parse(v)?,
                    "thin" => thin = parse(v)? as usize,
                    "h" => h = parse(v)?,
                    "chains" => chains = parse(v)? as usize,
                    _ => return Err(bad(format!("unknown metadata key {k:?}"))),
                }
            } else if dim.is_none() {
                dim = Some(line.split(',').count());
            } else {
                let cells: Vec<f64> = line.split(',').map(parse).collect::<Result<_>>()?;
                if Some(cells.len()) != dim {
                    return Err(bad(format!("row has {} cells", cells.len())));
                }
                rows.extend(cells);
            }
        }
        let dim = dim.ok_or_else(|| bad("missing header".into()))?;
        let anchor = anchor.ok_or_else(|| bad("missing anchor_x".into()))?;
        let n = rows.len() / dim;
        let samples = Array2::from_shape_vec((n, dim), rows).map_err(|e| bad(e.to_string()))?;
        let mut e = Self::new(anchor, samples, burn_in, thin, h)?;
        e.chains = chains;
        Ok(e)
    }
}

/// Mean computed as `v₀ + mean(v - v₀)`, exact for constant input.
fn shifted_mean(vals: &[f64]) -> f64 {
    let v0 = vals[0];
    let dev: Vec<f64> = vals.iter().map(|v| v - v0).collect();
    v0 + stats::mean(&dev)
}

/// Batch-means SE on `v - v₀`, exactly zero for constant input.
fn shifted_se(vals: &[f64]) -> f64 {
    let v0 = vals[0];
    let dev: Vec<f64> = vals.iter().map(|v| v - v0).collect();
    stats::batch_means_se(&dev, BATCHES.min(dev.len()))
}

/// Burn-in time `(2/β̂) log(1/tol)` for a fitted contraction rate `β̂/2`.
pub fn default_burn_in(rate: f64, tol: f64) -> f64 {
    (1.0 / tol).ln() / rate
}

/// One frozen trajectory started at `y = 0`, sampled every `thin` steps
/// after `burn_in` time units.
#[allow(clippy::too_many_arguments)]
pub fn sample_invariant(
    model: &ModelSpec,
    x: &[f64],
    burn_in: f64,
    n: usize,
    thin: usize,
    h: f64,
    stream: RngStream,
) -> Result<FrozenEnsemble> {
    sample_from(model, x, &vec![0.0; model.d2], burn_in, n, thin, h, stream)
}

#[allow(clippy::too_many_arguments)]
fn sample_from(
    model: &ModelSpec,
    x: &[f64],
    y0: &[f64],
    burn_in: f64,
    n: usize,
    thin: usize,
    h: f64,
    stream: RngStream,
) -> Result<FrozenEnsemble> {
    let samples = chain(model, x, y0, burn_in, n, thin, h, stream)?;
    FrozenEnsemble::new(x.to_vec(), samples, burn_in, thin, h)
}

#[allow(clippy::too_many_arguments)]
fn chain(
    model: &ModelSpec,
    x: &[f64],
    y0: &[f64],
    burn_in: f64,
    n: usize,
    thin: usize,
    h: f64,
    stream: RngStream,
) -> Result<Array2<f64>> {
    if !(burn_in >= 0.0) {
        return Err(Error::Argument(format!("burn_in must be nonnegative, got {burn_in}")));
    }
    if n == 0 || thin == 0 {
        return Err(Error::Argument("n and thin must be at least 1".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    if x.len() != model.d1 || y0.len() != model.d2 {
        return Err(Error::Argument("anchor or start has the wrong dimension".into()));
    }
    let burn_steps = (burn_in / h).ceil() as usize;
    let mut rng = stream.rng();
    let mut y = y0.to_vec();
    if burn_steps > 0 {
        advance_frozen(model, x, &mut y, burn_steps, h, &mut rng, |_, _| {})?;
    }
    let mut samples = Array2::zeros((n, model.d2));
    let mut row = 0;
    advance_frozen(model, x, &mut y, n * thin, h, &mut rng, |k, y| {
        if k % thin == 0 {
            samples.row_mut(row).assign(&ndarray::aview1(y));
            row += 1;
        }
    })?;
    Ok(samples)
}

/// Pool `chains` independent trajectories (run in parallel), each
/// contributing `n / chains` states, in chain order.
#[allow(clippy::too_many_arguments)]
pub fn sample_invariant_pooled(
    model: &ModelSpec,
    x: &[f64],
    burn_in: f64,
    n: usize,
    thin: usize,
    h: f64,
    chains: usize,
    stream: RngStream,
) -> Result<FrozenEnsemble> {
    if chains == 0 || n % chains != 0 {
        return Err(Error::Argument(format!("n = {n} must be a positive multiple of chains = {chains}")));
    }
    let per = n / chains;
    let y0 = vec![0.0; model.d2];
    let parts: Vec<Array2<f64>> = (0..chains)
        .into_par_iter()
        .map(|c| chain(model, x, &y0, burn_in, per, thin, h, stream.substream(c as u64)))
        .collect::<Result<_>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let samples = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut e = FrozenEnsemble::new(x.to_vec(), samples, burn_in, thin, h)?;
    e.chains = chains;
    Ok(e)
}

/// Continue the trajectory from the ensemble's last state.
pub fn continue_ensemble(model: &ModelSpec, ens: &FrozenEnsemble, n: usize, stream: RngStream) -> Result<FrozenEnsemble> {
    sample_from(model, ens.anchor_x(), ens.last(), 0.0, n, ens.thin, ens.h, stream)
}

/// `∫ b(t, x, y) μ^x(dy)` by ensemble averaging, with batch-means SE.
pub fn estimate_bbar(model: &ModelSpec, t: f64, x: &[f64], ensemble: &FrozenEnsemble) -> Result<(Vec<f64>, Vec<f64>)> {
    ensemble.require_anchor(x)?;
    let mut out = vec![0.0; model.d1];
    let mut cols = vec![Vec::with_capacity(ensemble.len()); model.d1];
    for y in ensemble.iter() {
        (model.b)(t, x, y, &mut out);
        for (c, v) in cols.iter_mut().zip(&out) {
            c.push(*v);
        }
    }
    let value = cols.iter().map(|c| shifted_mean(c)).collect();
    let se = cols.iter().map(|c| shifted_se(c)).collect();
    Ok((value, se))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionDiagnostic {
    pub times: Vec<f64>,
    pub log_distance: Vec<f64>,
    /// Fitted decay rate `β̂/2` of the distance.
    pub rate: f64,
    pub intercept: f64,
    /// Largest one-step increase of the log distance.
    pub max_increase: f64,
}

impl ContractionDiagnostic {
    pub fn beta_hat(&self) -> f64 {
        2.0 * self.rate
    }
}

/// Two frozen trajectories from `y1`, `y2` driven by the same noise; fits
/// the exponential decay rate of their distance.
pub fn contraction_diagnostic(
    model: &ModelSpec,
    x: &[f64],
    y1: &[f64],
    y2: &[f64],
    t_end: f64,
    h: f64,
    stream: RngStream,
) -> Result<ContractionDiagnostic> {
    if y1 == y2 {
        return Err(Error::Argument("contraction diagnostic needs distinct starting points".into()));
    }
    if y1.len() != model.d2 || y2.len() != model.d2 || x.len() != model.d1 {
        return Err(Error::Argument("starting points have the wrong dimension".into()));
    }
    let (n, h) = fit_step(t_end, h)?;
    // identical streams give identical noise in both runs
    let mut ya = y1.to_vec();
    let mut yb = y2.to_vec();
    let mut ra = stream.rng();
    let mut rb = stream.rng();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let mut times = vec![0.0];
    let mut logd = vec![dist(&ya, &yb).ln()];
    for k in 1..=n {
        advance_frozen(model, x, &mut ya, 1, h, &mut ra, |_, _| {})?;
        advance_frozen(model, x, &mut yb, 1, h, &mut rb, |_, _| {})?;
        let d = dist(&ya, &yb);
        if !(d > 1e-280) {
            break;
        }
        times.push(k as f64 * h);
        logd.push(d.ln());
    }
    if times.len() < 3 {
        return Err(Error::Numerical("distance collapsed before a rate could be fitted".into()));
    }
    let (slope, intercept, _) = stats::ols(&times, &logd);
    let max_increase = logd.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok(ContractionDiagnostic { times, log_distance: logd, rate: -slope, intercept, max_increase })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingDiagnostic {
    pub times: Vec<f64>,
    /// `P̂_t g(y) - ĝ∞`, signed.
    pub signed: Vec<f64>,
    /// `|P̂_t g(y) - ĝ∞|`.
    pub series: Vec<f64>,
    /// Monte Carlo SE of each entry (transition and stationary parts).
    pub se: Vec<f64>,
    pub g_inf: f64,
    pub g_inf_se: f64,
    /// Envelope constant `C`, fitted on the first half of the horizon.
    pub envelope_c: f64,
    /// Whether `C e^{-rate t}(1+|y|) + 3 SE` dominates the whole series.
    pub dominated: bool,
}

/// `E g(Y_t^{x,y}) - ∫ g dμ^x` on a time grid, from `reps` independent
/// frozen runs.
#[allow(clippy::too_many_arguments)]
pub fn mixing_diagnostic(
    model: &ModelSpec,
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    x: &[f64],
    y: &[f64],
    t_end: f64,
    h: f64,
    record_every: usize,
    reps: usize,
    rate: f64,
    stationary: &FrozenEnsemble,
    stream: RngStream,
) -> Result<MixingDiagnostic> {
    if reps < 100 {
        return Err(Error::Argument(format!("mixing diagnostic needs reps >= 100, got {reps}")));
    }
    stationary.require_anchor(x)?;
    let (n, h) = fit_step(t_end, h)?;
    let every = record_every.max(1);
    let n_rec = n / every;
    let runs: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream.substream(r as u64).rng();
            let mut yy = y.to_vec();
            let mut rec = Vec::with_capacity(n_rec + 1);
            rec.push(g(&yy));
            advance_frozen(model, x, &mut yy, n_rec * every, h, &mut rng, |k, s| {
                if k % every == 0 {
                    rec.push(g(s));
                }
            })?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let (g_inf, g_inf_se) = stationary.average(g);
    let mut times = Vec::with_capacity(n_rec + 1);
    let mut signed = Vec::with_capacity(n_rec + 1);
    let mut se = Vec::with_capacity(n_rec + 1);
    for j in 0..=n_rec {
        let col: Vec<f64> = runs.iter().map(|r| r[j]).collect();
        times.push((j * every) as f64 * h);
        signed.push(stats::mean(&col) - g_inf);
        se.push((stats::standard_error(&col).powi(2) + g_inf_se.powi(2)).sqrt());
    }
    let series: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
    let scale = 1.0 + y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let half = (series.len() / 2).max(1);
    let envelope_c = (0..half)
        .map(|j| series[j] / ((-rate * times[j]).exp() * scale))
        .fold(0.0, f64::max);
    let dominated = series
        .iter()
        .zip(&times)
        .zip(&se)
        .all(|((s, t), e)| *s <= envelope_c * (-rate * t).exp() * scale + 3.0 * e);
    Ok(MixingDiagnostic { times, signed, series, se, g_inf, g_inf_se, envelope_c, dominated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub eps: f64,
    pub t: f64,
    pub x_moment: f64,
    pub x_spread: f64,
    pub y_moment: f64,
    pub y_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentScan {
    pub p: f64,
    pub rows: Vec<MomentRow>,
    /// Max/min over ε of the terminal-time moments.
    pub x_ratio: f64,
    pub y_ratio: f64,
    /// MoM estimate of `E sup_t |Y_t|` per ε.
    pub sup_y: Vec<f64>,
    /// Log-log slope of `E sup|Y|` against `1/η`.
    pub sup_slope: f64,
}

/// Median-of-means estimates of `E|X_t|^p`, `E|Y_t|^p` at `t ∈ {T/2, T}` and
/// of `E sup_t |Y_t|` across an ε grid.
#[allow(clippy::too_many_arguments)]
pub fn uniform_moment_scan(
    model: &ModelSpec,
    schedule: &ScaleSchedule,
    eps_list: &[f64],
    p: f64,
    t_end: f64,
    reps: usize,
    groups: usize,
    kappa_cfl: f64,
    x0: &[f64],
    y0: &[f64],
    stream: RngStream,
) -> Result<MomentScan> {
    let cap = model.alpha1.min(model.alpha2);
    if !(p >= 1.0 && p < cap) {
        return Err(Error::Argument(format!("p = {p} must lie in [1, min(alpha1, alpha2) = {cap})")));
    }
    if eps_list.len() < 2 {
        return Err(Error::Argument("moment scan needs at least two eps values".into()));
    }
    if groups == 0 || reps % groups != 0 {
        return Err(Error::Argument(format!("reps = {reps} must be a multiple of groups = {groups}")));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut rows = Vec::new();
    let mut sup_y = Vec::new();
    let mut etas = Vec::new();
    for (ie, &eps) in eps_list.iter().enumerate() {
        let (n, h) = fit_step(t_end, crate::integrator::choose_step(eps, schedule, kappa_cfl))?;
        let mid = (n / 2).max(1);
        let es = stream.substream(ie as u64);
        // per replicate: |X|^p, |Y|^p at mid and end, sup|Y|
        let per: Vec<[f64; 5]> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = es.substream(r as u64).rng();
                let mut acc = [0.0; 5];
                let mut sup = norm(y0);
                run_coupled_streaming(model, schedule, eps, x0, y0, n, h, &mut rng, |k, x, y, _| {
                    sup = sup.max(norm(y));
                    if k == mid {
                        acc[0] = norm(x).powf(p);
                        acc[1] = norm(y).powf(p);
                    }
                    if k == n {
                        acc[2] = norm(x).powf(p);
                        acc[3] = norm(y).powf(p);
                    }
                    Ok(())
                })?;
                acc[4] = sup;
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let col = |i: usize| per.iter().map(|a| a[i]).collect::<Vec<f64>>();
        for (t, ix, iy) in [(mid as f64 * h, 0, 1), (t_end, 2, 3)] {
            rows.push(MomentRow {
                eps,
                t,
                x_moment: stats::median_of_means(&col(ix), groups)?,
                x_spread: stats::mom_spread(&col(ix), groups)?,
                y_moment: stats::median_of_means(&col(iy), groups)?,
                y_spread: stats::mom_spread(&col(iy), groups)?,
            });
        }
        sup_y.push(stats::median_of_means(&col(4), groups)?);
        etas.push(schedule.eta(eps));
    }
    let terminal: Vec<&MomentRow> = rows.iter().filter(|r| r.t == t_end).collect();
    let ratio = |f: &dyn Fn(&MomentRow) -> f64| {
        let vals: Vec<f64> = terminal.iter().map(|r| f(r)).collect();
        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / vals.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let x_ratio = ratio(&|r| r.x_moment);
    let y_ratio = ratio(&|r| r.y_moment);
    let (sup_slope, _, _) = stats::ols(
        &etas.iter().map(|e| (1.0 / e).ln()).collect::<Vec<_>>(),
        &sup_y.iter().map(|v| v.ln()).collect::<Vec<_>>(),
    );
    Ok(MomentScan { p, rows, x_ratio, y_ratio, sup_y, sup_slope })
}

/// Estimate `E cos Z` for the stationary stable Ornstein–Uhlenbeck law
/// `dZ = -κ Z dt + dL²` by a Birkhoff average along one frozen trajectory.
///
/// This is the only unknown in the sine benchmark's centering term, since
/// its frozen law at `x` is `a tanh(x) + Z`.
pub fn estimate_sine_center(p: &SineParams, n: usize, thin: usize, h: f64, stream: RngStream) -> Result<SineCenter> {
    let kappa = p.kappa;
    let mut ou = ModelSpec::zero(1, 1, p.alpha1, p.alpha2)?;
    ou.f = Arc::new(move |_, y, out| out[0] = -kappa * y[0]);
    let ens = sample_invariant(&ou, &[0.0], 10.0 / kappa, n, thin, h, stream)?;
    let (cos_mean, se) = ens.average(|y| y[0].cos());
    Ok(SineCenter { cos_mean, se })
}

/// Default parameters for [`estimate_sine_center`]: SE about `10⁻³`.
pub fn sine_center_default(p: &SineParams, stream: RngStream) -> Result<SineCenter> {
    estimate_sine_center(p, 200_000, 250, 2e-3, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_benchmark, make_schedule, LinearParams, Regime};

    fn linear() -> ModelSpec {
        make_linear_benchmark(LinearParams::default()).unwrap()
    }

    #[test]
    fn ensemble_mean_centers_on_ax() {
        let m = linear();
        let e = sample_invariant(&m, &[2.0], 8.0, 20_000, 20, 0.01, RngStream::new(1, 0)).unwrap();
        let (mean, se) = e.average(|y| y[0]);
        assert!((mean - 1.0).abs() < 3.0 * se + 0.01, "{mean} ± {se}");
        assert!(e.ess > 1000.0);
    }

    #[test]
    fn y_independent_b_is_exact() {
        let mut m = linear();
        m.b = Arc::new(|_, x, _, out| out[0] = -0.8 * x[0]);
        let e = sample_invariant(&m, &[2.0], 1.0, 1000, 5, 0.01, RngStream::new(2, 0)).unwrap();
        let (v, se) = estimate_bbar(&m, 0.4, &[2.0], &e).unwrap();
        assert_eq!(v[0], -1.6);
        assert_eq!(se[0], 0.0);
        assert!(estimate_bbar(&m, 0.4, &[1.0], &e).is_err());
    }

    #[test]
    fn thinning_does_not_change_the_target() {
        let m = linear();
        let e1 = sample_invariant(&m, &[1.0], 8.0, 40_000, 1, 0.01, RngStream::new(3, 0)).unwrap();
        let e10 = sample_invariant(&m, &[1.0], 8.0, 20_000, 10, 0.01, RngStream::new(3, 1)).unwrap();
        let (a, sa) = e1.average(|y| y[0].tanh());
        let (b, sb) = e10.average(|y| y[0].tanh());
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a}±{sa} vs {b}±{sb}");
    }

    #[test]
    fn contraction_rate_linear() {
        let m = linear();
        for (y1, y2) in [(1.0, 0.0), (1e-3, 0.0)] {
            let d = contraction_diagnostic(&m, &[1.0], &[y1], &[y2], 5.0, 1e-3, RngStream::new(4, 0)).unwrap();
            assert!((d.rate - 1.0).abs() < 0.02, "rate {}", d.rate);
            assert!(d.max_increase <= 1e-12);
        }
        assert!(contraction_diagnostic(&m, &[1.0], &[1.0], &[1.0], 5.0, 1e-3, RngStream::new(4, 0)).is_err());
    }

    #[test]
    fn mixing_of_identity_observable() {
        let m = linear();
        let ens = sample_invariant(&m, &[1.0], 8.0, 20_000, 20, 0.01, RngStream::new(5, 0)).unwrap();
        let g = |y: &[f64]| y[0];
        let d = mixing_diagnostic(&m, &g, &[1.0], &[3.0], 4.0, 0.01, 50, 2000, 1.0, &ens, RngStream::new(5, 1))
            .unwrap();
        for ((t, s), e) in d.times.iter().zip(&d.signed).zip(&d.se) {
            let exact = (-t).exp() * (3.0 - 0.5);
            assert!((s - exact).abs() < 3.0 * e + 0.02 * exact.abs(), "t={t}: {s} vs {exact} (se {e})");
        }
        let c = |_: &[f64]| 1.5;
        let d = mixing_diagnostic(&m, &c, &[1.0], &[3.0], 1.0, 0.01, 10, 100, 1.0, &ens, RngStream::new(5, 2)).unwrap();
        assert!(d.series.iter().all(|v| *v == 0.0));
        assert!(d.dominated);
    }

    #[test]
    fn moment_scan_zero_model_and_bounds() {
        let z = ModelSpec::zero(1, 1, 1.5, 1.5).unwrap();
        let s = make_schedule(Regime::R1, 1.0, 0.125, 0.5, 1.5, 1.5).unwrap();
        let scan =
            uniform_moment_scan(&z, &s, &[0.25, 0.125], 1.0, 1.0, 3000, 30, 20.0, &[0.0], &[0.0], RngStream::new(6, 0))
                .unwrap();
        let exact = crate::noise::stable_first_absolute_moment(1.5);
        for r in scan.rows.iter().filter(|r| r.t == 1.0) {
            assert!((r.x_moment - exact).abs() < 4.0 * r.x_spread + 0.02, "{r:?} vs {exact}");
        }
        assert!(uniform_moment_scan(&z, &s, &[0.25, 0.125], 1.5, 1.0, 30, 30, 20.0, &[0.0], &[0.0], RngStream::new(0, 0))
            .is_err());
    }

    #[test]
    fn ensemble_csv_round_trip() {
        let m = linear();
        let e = sample_invariant(&m, &[0.5], 1.0, 50, 3, 0.01, RngStream::new(7, 0)).unwrap();
        let back = FrozenEnsemble::from_csv(&e.to_csv()).unwrap();
        assert_eq!(back.samples(), e.samples());
        assert_eq!(back.anchor_x(), e.anchor_x());
        assert_eq!(back.h, e.h);
    }

    #[test]
    fn pooled_chains_are_deterministic() {
        let m = linear();
        let a = sample_invariant_pooled(&m, &[1.0], 2.0, 400, 5, 0.01, 4, RngStream::new(8, 0)).unwrap();
        let b = sample_invariant_pooled(&m, &[1.0], 2.0, 400, 5, 0.01, 4, RngStream::new(8, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.chains, 4);
        assert!(sample_invariant_pooled(&m, &[1.0], 2.0, 401, 5, 0.01, 4, RngStream::new(8, 0)).is_err());
    }
}
