//! Strong and weak error experiments over an ε grid, compared against the
//! theoretical predictors by log-log regression.

pub mod predictor;
pub mod tabulate;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ergodics::{sine_center_default, FrozenEnsemble};
use crate::error::{Error, Result};
use crate::integrator::{
    choose_step, fit_step, regime_drift_kinds, simulate_averaged, simulate_coupled_with_noise, AveragedDrift,
    DriftField, DriftKind, FnDrift, L1Source, NoisePath,
};
use crate::model::{
    make_linear_benchmark, make_schedule, make_sine_benchmark, LinearParams, ModelSpec, Regime, ScaleSchedule,
    SineCenter, SineParams,
};
use crate::noise::RngStream;
use crate::stats::{self, RateFit};

pub use predictor::{predictor_slope, predictor_terms, theoretical_predictor, PredictorTerm, RateKind, STRONG_REJECTION};
pub use tabulate::{
    estimate_contraction_rate, tabulate_drift, tabulate_ensembles, DriftTable, Extrapolation, TabulationSpec,
};

/// Stream ids of the experiment phases, so that phases never share noise.
pub mod streams {
    pub const MODEL: u64 = 1;
    pub const RATE: u64 = 2;
    pub const ENSEMBLES: u64 = 3;
    pub const TABLES: u64 = 4;
    pub const CONDITIONS: u64 = 5;
    pub const SIMULATE: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const STRONG: u64 = 10;
    pub const WEAK: u64 = 11;
    pub const BOOTSTRAP: u64 = 12;
    pub const REFINE: u64 = 13;
}

/// Where averaged drifts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftSource {
    /// Closed forms when the model has them, tables otherwise.
    Auto,
    Analytic,
    Tabulated,
}

/// Bounded test observables for weak errors, applied to `x₀`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phi {
    Cos,
    Sin,
    Tanh,
    Const,
}

impl Phi {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Phi::Cos => x[0].cos(),
            Phi::Sin => x[0].sin(),
            Phi::Tanh => x[0].tanh(),
            Phi::Const => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Phi::Cos => "cos",
            Phi::Sin => "sin",
            Phi::Tanh => "tanh",
            Phi::Const => "const",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: String,
    /// Benchmark parameter overrides, e.g. `{"kappa": 2}`.
    pub params: BTreeMap<String, f64>,
    pub regime: Regime,
    pub e: Option<f64>,
    pub g: Option<f64>,
    pub b: Option<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub v: f64,
    pub eps_grid: Vec<f64>,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub p: f64,
    pub phi: Vec<Phi>,
    pub reps: usize,
    pub groups: usize,
    pub kappa_cfl: f64,
    pub seed: u64,
    pub checkpoints: Vec<f64>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub drift_source: DriftSource,
    /// Drift sets of other regimes evaluated on the same coupled paths.
    pub compare: Vec<Regime>,
    pub bootstrap: usize,
    /// Attach an `h` against `h/2` study at the largest ε (strong only).
    pub refinement: bool,
    pub tabulation: TabulationSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "linear".into(),
            params: BTreeMap::new(),
            regime: Regime::R1,
            e: None,
            g: None,
            b: None,
            alpha1: 1.5,
            alpha2: 1.5,
            v: 1.5,
            eps_grid: (3..=8).map(|k| 2f64.powi(-k)).collect(),
            t_end: 1.0,
            p: 1.0,
            phi: vec![Phi::Cos],
            reps: 2000,
            groups: 30,
            kappa_cfl: 20.0,
            seed: 0,
            checkpoints: vec![0.25, 0.5, 0.75, 1.0],
            x0: vec![1.0],
            y0: vec![0.0],
            drift_source: DriftSource::Auto,
            compare: Vec::new(),
            bootstrap: 200,
            refinement: true,
            tabulation: TabulationSpec::default(),
        }
    }
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Configuration(format!("{key}: {msg}"))
}

impl ExperimentConfig {
    /// Exponents, falling back to the regime's defaults.
    pub fn exponents(&self) -> (f64, f64, f64) {
        let (e, g, b) = ScaleSchedule::default_exponents(self.regime);
        (self.e.unwrap_or(e), self.g.unwrap_or(g), self.b.unwrap_or(b))
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        let (e, g, b) = self.exponents();
        make_schedule(self.regime, e, g, b, self.alpha2, self.v)
    }

    /// Replicates actually run: `reps` rounded up to a multiple of `groups`.
    pub fn effective_reps(&self) -> usize {
        self.reps.div_ceil(self.groups.max(1)) * self.groups.max(1)
    }

    pub fn stream(&self, phase: u64) -> RngStream {
        RngStream::new(self.seed, phase)
    }

    /// Every invariant of the config; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.model.as_str(), "linear" | "sine") {
            return Err(cfg_err("model", format!("unknown model {:?}; expected \"linear\" or \"sine\"", self.model)));
        }
        for (k, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(a > 1.0 && a < 2.0) {
                return Err(cfg_err(k, format!("must lie in (1, 2), got {a}")));
            }
        }
        if self.eps_grid.is_empty() || self.eps_grid.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(cfg_err("eps_grid", "entries must lie in (0, 1]"));
        }
        if self.eps_grid.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(cfg_err("eps_grid", "must be strictly decreasing"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(cfg_err("T", format!("must be positive, got {}", self.t_end)));
        }
        let cap = self.alpha1.min(self.alpha2);
        if !(self.p >= 1.0) {
            return Err(cfg_err("p", format!("must be >= 1, got {}", self.p)));
        }
        if !(self.p < cap) {
            return Err(cfg_err("p", format!("p must be < min(alpha1, alpha2) = {cap}, got {}", self.p)));
        }
        if self.groups == 0 {
            return Err(cfg_err("groups", "must be at least 1"));
        }
        if self.reps == 0 {
            return Err(cfg_err("reps", "must be at least 1"));
        }
        if !(self.kappa_cfl >= 1.0) {
            return Err(cfg_err("kappa_cfl", format!("must be >= 1, got {}", self.kappa_cfl)));
        }
        if self.checkpoints.is_empty() || self.checkpoints.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
            return Err(cfg_err("checkpoints", "fractions must lie in (0, 1]"));
        }
        if self.phi.is_empty() {
            return Err(cfg_err("phi", "at least one observable is required"));
        }
        if self.x0.len() != 1 || self.y0.len() != 1 {
            return Err(cfg_err("x0", "the built-in benchmarks have scalar x0 and y0"));
        }
        self.schedule().map_err(|e| match e {
            Error::Schedule { relation, detail } => Error::Schedule { relation, detail: format!("e/g/b: {detail}") },
            other => other,
        })?;
        predictor_terms(self.regime, RateKind::Weak, self.alpha1, self.alpha2, self.v, &self.schedule()?)
            .map_err(|e| cfg_err("v", e))?;
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the resolved config.
    pub fn config_hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in format!("{self:?}").bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}


fn merge_params<T>(base: T, over: &BTreeMap<String, f64>, skip: &[&str]) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(base).map_err(|e| cfg_err("params", e))?;
    let obj = value.as_object_mut().expect("parameter structs serialize to objects");
    for (k, v) in over {
        if skip.contains(&k.as_str()) {
            continue;
        }
        if !obj.contains_key(k) || k == "alpha1" || k == "alpha2" {
            return Err(cfg_err("params", format!("unknown model parameter {k:?}")));
        }
        obj.insert(k.clone(), serde_json::json!(v));
    }
    serde_json::from_value(value).map_err(|e| cfg_err("params", e))
}

/// The named benchmark with config overrides. For "sine", `E cos Z` comes
/// from `params.center` when given and is estimated otherwise.
pub fn build_model(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    match cfg.model.as_str() {
        "linear" => {
            let base = LinearParams { alpha1: cfg.alpha1, alpha2: cfg.alpha2, ..LinearParams::default() };
            let mut m = make_linear_benchmark(merge_params(base, &cfg.params, &[])?)?;
            m.holder.v = cfg.v;
            Ok(m)
        }
        "sine" => {
            let base = SineParams { alpha1: cfg.alpha1, alpha2: cfg.alpha2, ..SineParams::default() };
            let p: SineParams = merge_params(base, &cfg.params, &["center"])?;
            let center = match cfg.params.get("center") {
                Some(&c) => SineCenter { cos_mean: c, se: 0.0 },
                None => sine_center_default(&p, cfg.stream(streams::MODEL))?,
            };
            let mut m = make_sine_benchmark(p, center)?;
            m.holder.v = cfg.v;
            Ok(m)
        }
        other => Err(cfg_err("model", format!("unknown model {other:?}"))),
    }
}

/// Averaged drift of a regime plus any tables computed to build it.
pub struct ResolvedDrifts {
    pub drift: AveragedDrift,
    pub tables: Vec<DriftTable>,
}

fn analytic_field(model: &ModelSpec, kind: DriftKind) -> Option<Arc<dyn DriftField>> {
    let f = match kind {
        DriftKind::Bbar => model.analytic.bbar.clone(),
        DriftKind::Cbar => model.analytic.cbar.clone(),
        DriftKind::Hbar => model.analytic.hbar.clone(),
    }?;
    Some(Arc::new(FnDrift::new(model.d1, f)))
}

fn table_matches(t: &DriftTable, kind: DriftKind, model: &ModelSpec, cfg: &ExperimentConfig) -> bool {
    t.kind == kind
        && t.model_fingerprint == model.fingerprint()
        && t.x_nodes == cfg.tabulation.x_grid()
        && t.t_nodes == cfg.tabulation.t_grid(cfg.t_end)
}

/// Drift components for `regime`: closed forms where allowed and available,
/// cached tables when they match, fresh tables otherwise.
pub fn resolve_drifts(model: &ModelSpec, cfg: &ExperimentConfig, regime: Regime, cache: &[DriftTable]) -> Result<ResolvedDrifts> {
    let mut components: Vec<(DriftKind, Arc<dyn DriftField>)> = Vec::new();
    let mut tables = Vec::new();
    let mut prepared: Option<(f64, Vec<FrozenEnsemble>)> = None;
    for &kind in regime_drift_kinds(regime) {
        if cfg.drift_source != DriftSource::Tabulated {
            if let Some(f) = analytic_field(model, kind) {
                components.push((kind, f));
                continue;
            }
            if cfg.drift_source == DriftSource::Analytic {
                return Err(Error::Prerequisite(format!(
                    "model {} has no closed form for {}; use drift_source \"tabulated\"",
                    model.name,
                    kind.label()
                )));
            }
        }
        let table = match cache.iter().find(|t| table_matches(t, kind, model, cfg)) {
            Some(t) => t.clone(),
            None => {
                if prepared.is_none() {
                    let rate = estimate_contraction_rate(model, &cfg.tabulation, cfg.stream(streams::RATE))?;
                    let ens = tabulate_ensembles(model, &cfg.tabulation, rate, cfg.stream(streams::ENSEMBLES))?;
                    prepared = Some((rate, ens));
                }
                let (rate, ens) = prepared.as_ref().expect("prepared above");
                let s = cfg.stream(streams::TABLES).substream(kind as u64);
                tabulate_drift(model, kind, cfg.t_end, &cfg.tabulation, *rate, ens, s)?
            }
        };
        components.push((kind, Arc::new(table.clone())));
        tables.push(table);
    }
    Ok(ResolvedDrifts { drift: AveragedDrift::for_regime(regime, components)?, tables })
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub eps: f64,
    pub error: f64,
    pub spread: f64,
    pub predictor: f64,
    pub regime: Regime,
    /// `p=<p>` for strong errors, `phi=<name>` for weak ones.
    pub stat: String,
    pub steps: usize,
    pub h: f64,
}

/// Errors of another regime's drift set on the same coupled paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub regime: Regime,
    pub drift_provenance: String,
    pub errors: Vec<f64>,
    pub spreads: Vec<f64>,
}

/// Grid-sup surrogate check: the same noise on `h` and `h/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub eps: f64,
    pub h: f64,
    pub reps: usize,
    pub error_h: f64,
    pub error_half: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: RateKind,
    pub regime: Regime,
    pub model: String,
    pub stat: String,
    pub schedule: ScaleSchedule,
    pub alpha1: f64,
    pub alpha2: f64,
    pub v: f64,
    pub p: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub reps: usize,
    pub groups: usize,
    pub rows: Vec<ErrorRow>,
    /// Absent when some error is not positive (e.g. identical paths).
    pub fit: Option<RateFit>,
    pub fit_note: Option<String>,
    /// Exponent of the dominant predictor term (times `p` for strong).
    pub predictor_slope: f64,
    /// Max over min of `error / predictor` across the grid.
    pub dominance_ratio: Option<f64>,
    pub comparisons: Vec<Comparison>,
    pub refinement: Option<Refinement>,
    pub drift_provenance: String,
    pub normalization: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ErrorReport {
    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error).collect()
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

pub const NORMALIZATION: &str = "standard symmetric alpha-stable increments: E exp(iu L_t) = exp(-t |u|^alpha)";

struct Grid {
    eps: f64,
    n: usize,
    h: f64,
}

fn eps_steps(cfg: &ExperimentConfig, sched: &ScaleSchedule) -> Result<Vec<Grid>> {
    cfg.eps_grid
        .iter()
        .map(|&eps| {
            let (n, h) = fit_step(cfg.t_end, choose_step(eps, sched, cfg.kappa_cfl))?;
            Ok(Grid { eps, n, h })
        })
        .collect()
}

fn check_regime(cfg: &ExperimentConfig, drifts: &AveragedDrift) -> Result<()> {
    if drifts.regime != cfg.regime {
        return Err(Error::Configuration(format!(
            "regime mismatch: config is {} but the drift set is for {}",
            cfg.regime, drifts.regime
        )));
    }
    Ok(())
}

fn fit_and_ratio<T: Clone>(
    errors: &[f64],
    eps: &[f64],
    predictor: &[f64],
    replicates: &[Vec<T>],
    aggregate: impl Fn(&[T]) -> Result<f64>,
    cfg: &ExperimentConfig,
) -> Result<(Option<RateFit>, Option<String>, Option<f64>)> {
    if errors.iter().any(|e| !(*e > 0.0)) {
        return Ok((None, Some("some errors are not positive; the coupled and averaged paths coincide".into()), None));
    }
    if errors.len() < 3 {
        return Ok((None, Some("slopes need at least 3 grid points".into()), None));
    }
    let fit = stats::fit_rate_bootstrap(errors, eps, replicates, aggregate, cfg.bootstrap, cfg.stream(streams::BOOTSTRAP))?;
    let ratios: Vec<f64> = errors.iter().zip(predictor).map(|(e, p)| e / p).collect();
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((Some(fit), None, Some(hi / lo)))
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Coupled run with averaged paths for every drift set advanced on the same
/// `ΔL¹`; `visit(k, x, xbars)` after each step.
#[allow(clippy::too_many_arguments)]
fn coupled_with_averaged(
    model: &ModelSpec,
    sched: &ScaleSchedule,
    cfg: &ExperimentConfig,
    grid: &Grid,
    sets: &[&AveragedDrift],
    stream: RngStream,
    mut visit: impl FnMut(usize, &[f64], &[Vec<f64>]),
) -> Result<()> {
    let mut rng = stream.rng();
    let mut xbars: Vec<Vec<f64>> = sets.iter().map(|_| cfg.x0.clone()).collect();
    let mut buf = vec![0.0; model.d1];
    let h = grid.h;
    crate::integrator::run_coupled_streaming(model, sched, grid.eps, &cfg.x0, &cfg.y0, grid.n, h, &mut rng, |k, x, _, dl1| {
        let t = (k - 1) as f64 * h;
        for (xb, d) in xbars.iter_mut().zip(sets) {
            d.eval(t, xb, &mut buf);
            for i in 0..xb.len() {
                xb[i] += buf[i] * h + dl1[i];
            }
            if !xb.iter().all(|v| v.abs() <= crate::integrator::BLOW_UP_LIMIT) {
                return Err(Error::BlowUp { step: k, detail: "averaged path".into() });
            }
        }
        visit(k, x, &xbars);
        Ok(())
    })
}

/// `E sup_t |X^ε_t - X̄_t|^p` per ε by median of means, with `X̄` driven by the
/// recorded `ΔL¹` of each coupled path.
pub fn run_strong_experiment(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    drifts: &AveragedDrift,
    comparisons: &[AveragedDrift],
) -> Result<ErrorReport> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    predictor_terms(cfg.regime, RateKind::Strong, cfg.alpha1, cfg.alpha2, cfg.v, &sched)?;
    check_regime(cfg, drifts)?;
    let reps = cfg.effective_reps();
    let grids = eps_steps(cfg, &sched)?;
    let sets: Vec<&AveragedDrift> = std::iter::once(drifts).chain(comparisons).collect();
    let mut per_eps: Vec<Vec<Vec<f64>>> = Vec::new(); // [eps][set][rep]
    for (ie, grid) in grids.iter().enumerate() {
        let es = cfg.stream(streams::STRONG).substream(ie as u64);
        let per_rep: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut sup = vec![0.0f64; sets.len()];
                coupled_with_averaged(model, &sched, cfg, grid, &sets, es.substream(r as u64), |_, x, xbars| {
                    for (s, xb) in sup.iter_mut().zip(xbars) {
                        *s = s.max(norm_diff(x, xb));
                    }
                })?;
                Ok(sup.into_iter().map(|s| s.powf(cfg.p)).collect())
            })
            .collect::<Result<_>>()?;
        per_eps.push((0..sets.len()).map(|s| per_rep.iter().map(|v| v[s]).collect()).collect());
    }
    let mom = |xs: &[f64]| stats::median_of_means(xs, cfg.groups);
    let errors_of = |s: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let e = per_eps.iter().map(|v| mom(&v[s])).collect::<Result<Vec<_>>>()?;
        let sp = per_eps.iter().map(|v| stats::mom_spread(&v[s], cfg.groups)).collect::<Result<Vec<_>>>()?;
        Ok((e, sp))
    };
    let (errors, spreads) = errors_of(0)?;
    let theta: Vec<f64> = cfg
        .eps_grid
        .iter()
        .map(|&e| theoretical_predictor(cfg.regime, RateKind::Strong, cfg.alpha1, cfg.alpha2, cfg.v, &sched, e).map(|t| t.powf(cfg.p)))
        .collect::<Result<_>>()?;
    let stat = format!("p={}", cfg.p);
    let rows = grids
        .iter()
        .enumerate()
        .map(|(i, g)| ErrorRow {
            eps: g.eps,
            error: errors[i],
            spread: spreads[i],
            predictor: theta[i],
            regime: cfg.regime,
            stat: stat.clone(),
            steps: g.n,
            h: g.h,
        })
        .collect();
    let replicates: Vec<Vec<f64>> = per_eps.iter().map(|v| v[0].clone()).collect();
    let (fit, fit_note, dominance_ratio) = fit_and_ratio(&errors, &cfg.eps_grid, &theta, &replicates, mom, cfg)?;
    let comparisons = comparisons
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (errors, spreads) = errors_of(i + 1)?;
            Ok(Comparison { regime: d.regime, drift_provenance: d.provenance(), errors, spreads })
        })
        .collect::<Result<_>>()?;
    let refinement = if cfg.refinement { Some(refinement_study(cfg, model, &sched, drifts, &grids[0])?) } else { None };
    Ok(ErrorReport {
        kind: RateKind::Strong,
        regime: cfg.regime,
        model: model.name.clone(),
        stat,
        schedule: sched,
        alpha1: cfg.alpha1,
        alpha2: cfg.alpha2,
        v: cfg.v,
        p: cfg.p,
        t_end: cfg.t_end,
        reps,
        groups: cfg.groups,
        rows,
        fit,
        fit_note,
        predictor_slope: cfg.p * predictor_slope(cfg.regime, RateKind::Strong, cfg.alpha1, cfg.alpha2, cfg.v, &sched, &cfg.eps_grid)?,
        dominance_ratio,
        comparisons,
        refinement,
        drift_provenance: drifts.provenance(),
        normalization: NORMALIZATION.into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
    })
}

fn refinement_study(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    sched: &ScaleSchedule,
    drifts: &AveragedDrift,
    grid: &Grid,
) -> Result<Refinement> {
    let reps = (10 * cfg.groups).min(cfg.effective_reps());
    let stream = cfg.stream(streams::REFINE);
    let sup_err = |noise: &NoisePath| -> Result<f64> {
        let c = simulate_coupled_with_noise(model, sched, grid.eps, &cfg.x0, &cfg.y0, noise)?;
        let a = simulate_averaged(drifts, &cfg.x0, cfg.t_end, noise.h, L1Source::Coupled(noise.dl1.view()))?;
        let mut s = 0.0f64;
        for k in 0..c.xs.nrows() {
            s = s.max(norm_diff(c.xs.row(k).as_slice().unwrap(), a.xs.row(k).as_slice().unwrap()));
        }
        Ok(s.powf(cfg.p))
    };
    let pairs: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let fine = NoisePath::generate(model, 2 * grid.n, grid.h / 2.0, stream.substream(r as u64))?;
            let coarse = fine.coarsen()?;
            Ok((sup_err(&coarse)?, sup_err(&fine)?))
        })
        .collect::<Result<_>>()?;
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let g = cfg.groups.min(reps);
    let error_h = stats::median_of_means(&a, g)?;
    let error_half = stats::median_of_means(&b, g)?;
    Ok(Refinement {
        eps: grid.eps,
        h: grid.h,
        reps,
        error_h,
        error_half,
        relative_gap: (error_h - error_half).abs() / error_half.max(f64::MIN_POSITIVE),
    })
}

/// `max_t |E φ(X^ε_t) - E φ(X̄_t)|` over the checkpoints, one report per
/// observable, all sharing the coupled paths. Each expectation difference
/// is a median of means of paired differences on common `ΔL¹`.
pub fn run_weak_experiment(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    drifts: &AveragedDrift,
    comparisons: &[AveragedDrift],
) -> Result<Vec<ErrorReport>> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    predictor_terms(cfg.regime, RateKind::Weak, cfg.alpha1, cfg.alpha2, cfg.v, &sched)?;
    check_regime(cfg, drifts)?;
    let reps = cfg.effective_reps();
    let grids = eps_steps(cfg, &sched)?;
    let sets: Vec<&AveragedDrift> = std::iter::once(drifts).chain(comparisons).collect();
    let (ns, nf, nc) = (sets.len(), cfg.phi.len(), cfg.checkpoints.len());
    let idx = |s: usize, f: usize, c: usize| (s * nf + f) * nc + c;
    // [eps][rep][set, phi, checkpoint]
    let mut per_eps: Vec<Vec<Vec<f64>>> = Vec::new();
    for (ie, grid) in grids.iter().enumerate() {
        let ks: Vec<usize> = cfg.checkpoints.iter().map(|c| ((c * grid.n as f64).round() as usize).max(1)).collect();
        let es = cfg.stream(streams::WEAK).substream(ie as u64);
        let per_rep: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut out = vec![0.0; ns * nf * nc];
                coupled_with_averaged(model, &sched, cfg, grid, &sets, es.substream(r as u64), |k, x, xbars| {
                    for (c, &kc) in ks.iter().enumerate() {
                        if kc == k {
                            for (s, xb) in xbars.iter().enumerate() {
                                for (f, phi) in cfg.phi.iter().enumerate() {
                                    out[idx(s, f, c)] = phi.eval(x) - phi.eval(xb);
                                }
                            }
                        }
                    }
                })?;
                Ok(out)
            })
            .collect::<Result<_>>()?;
        per_eps.push(per_rep);
    }
    let groups = cfg.groups;
    let weak_error = |reps: &[Vec<f64>], s: usize, f: usize| -> Result<(f64, f64)> {
        let mut best = (0.0f64, 0.0f64);
        for c in 0..nc {
            let col: Vec<f64> = reps.iter().map(|v| v[idx(s, f, c)]).collect();
            let m = stats::median_of_means(&col, groups)?.abs();
            if m > best.0 || c == 0 {
                best = (m, stats::mom_spread(&col, groups)?);
            }
        }
        Ok(best)
    };
    let theta: Vec<f64> = cfg
        .eps_grid
        .iter()
        .map(|&e| theoretical_predictor(cfg.regime, RateKind::Weak, cfg.alpha1, cfg.alpha2, cfg.v, &sched, e))
        .collect::<Result<_>>()?;
    let pslope = predictor_slope(cfg.regime, RateKind::Weak, cfg.alpha1, cfg.alpha2, cfg.v, &sched, &cfg.eps_grid)?;
    let mut reports = Vec::new();
    for (f, phi) in cfg.phi.iter().enumerate() {
        let stat = format!("phi={}", phi.label());
        let main: Vec<(f64, f64)> = per_eps.iter().map(|r| weak_error(r, 0, f)).collect::<Result<_>>()?;
        let errors: Vec<f64> = main.iter().map(|m| m.0).collect();
        let rows = grids
            .iter()
            .enumerate()
            .map(|(i, g)| ErrorRow {
                eps: g.eps,
                error: main[i].0,
                spread: main[i].1,
                predictor: theta[i],
                regime: cfg.regime,
                stat: stat.clone(),
                steps: g.n,
                h: g.h,
            })
            .collect();
        let aggregate = |rs: &[Vec<f64>]| weak_error(rs, 0, f).map(|v| v.0);
        let (fit, fit_note, dominance_ratio) = fit_and_ratio(&errors, &cfg.eps_grid, &theta, &per_eps, aggregate, cfg)?;
        let comps = comparisons
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let e: Vec<(f64, f64)> = per_eps.iter().map(|r| weak_error(r, i + 1, f)).collect::<Result<_>>()?;
                Ok(Comparison {
                    regime: d.regime,
                    drift_provenance: d.provenance(),
                    errors: e.iter().map(|v| v.0).collect(),
                    spreads: e.iter().map(|v| v.1).collect(),
                })
            })
            .collect::<Result<_>>()?;
        reports.push(ErrorReport {
            kind: RateKind::Weak,
            regime: cfg.regime,
            model: model.name.clone(),
            stat,
            schedule: sched,
            alpha1: cfg.alpha1,
            alpha2: cfg.alpha2,
            v: cfg.v,
            p: cfg.p,
            t_end: cfg.t_end,
            reps,
            groups,
            rows,
            fit,
            fit_note,
            predictor_slope: pslope,
            dominance_ratio,
            comparisons: comps,
            refinement: None,
            drift_provenance: drifts.provenance(),
            normalization: NORMALIZATION.into(),
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(regime: Regime) -> ExperimentConfig {
        ExperimentConfig {
            regime,
            eps_grid: vec![0.25, 0.125, 0.0625],
            reps: 120,
            groups: 6,
            kappa_cfl: 5.0,
            bootstrap: 50,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_rounding() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"model":"linear","regime":"R2","eps_grid":[0.125,0.0625]}"#).unwrap();
        assert_eq!((c.t_end, c.p, c.reps, c.kappa_cfl, c.seed), (1.0, 1.0, 2000, 20.0, 0));
        assert_eq!(c.effective_reps(), 2010);
        c.validate().unwrap();
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modle":"linear"}"#).is_err());
    }

    #[test]
    fn config_rejections_name_the_key() {
        let mut c = ExperimentConfig { regime: Regime::R4, e: Some(1.0), g: Some(0.5), b: Some(0.25), ..Default::default() };
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("bexp = g"), "{err}");
        c = ExperimentConfig { p: 1.6, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("p must be < min(alpha1, alpha2)"));
        c = ExperimentConfig { eps_grid: vec![0.1, 0.2], ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("eps_grid"));
        c = ExperimentConfig { params: [("kapa".to_string(), 1.0)].into(), ..Default::default() };
        assert!(build_model(&c).unwrap_err().to_string().contains("kapa"));
    }

    #[test]
    fn zero_drifts_give_zero_strong_error() {
        let cfg = small(Regime::R1);
        let m = ModelSpec::zero(1, 1, 1.5, 1.5).unwrap();
        let d = AveragedDrift::for_regime(Regime::R1, vec![(DriftKind::Bbar, Arc::new(FnDrift::zero(1)))]).unwrap();
        let rep = run_strong_experiment(&cfg, &m, &d, &[]).unwrap();
        assert!(rep.rows.iter().all(|r| r.error == 0.0));
        assert!(rep.fit.is_none() && rep.fit_note.is_some());
    }

    #[test]
    fn regime_mismatch_and_strong_rejection() {
        let cfg = small(Regime::R2);
        let m = build_model(&cfg).unwrap();
        let d1 = resolve_drifts(&m, &cfg, Regime::R1, &[]).unwrap();
        assert!(matches!(run_strong_experiment(&cfg, &m, &d1.drift, &[]), Err(Error::Configuration(_))));
        let cfg3 = small(Regime::R3);
        let d3 = resolve_drifts(&m, &cfg3, Regime::R3, &[]).unwrap();
        let err = run_strong_experiment(&cfg3, &m, &d3.drift, &[]).unwrap_err();
        assert!(matches!(err, Error::Regime(_)) && err.to_string().contains("leads to contradictions again"));
    }

    #[test]
    fn constant_phi_gives_zero_weak_error() {
        let cfg = ExperimentConfig { phi: vec![Phi::Const, Phi::Cos], ..small(Regime::R1) };
        let m = build_model(&cfg).unwrap();
        let d = resolve_drifts(&m, &cfg, Regime::R1, &[]).unwrap();
        let reps = run_weak_experiment(&cfg, &m, &d.drift, &[]).unwrap();
        assert_eq!(reps.len(), 2);
        assert!(reps[0].rows.iter().all(|r| r.error == 0.0));
        assert!(reps[1].rows.iter().all(|r| r.error > 0.0));
    }

    #[test]
    fn strong_report_is_deterministic_and_complete() {
        let cfg = small(Regime::R2);
        let m = build_model(&cfg).unwrap();
        let d2 = resolve_drifts(&m, &cfg, Regime::R2, &[]).unwrap();
        let d1 = resolve_drifts(&m, &cfg, Regime::R1, &[]).unwrap();
        let a = run_strong_experiment(&cfg, &m, &d2.drift, std::slice::from_ref(&d1.drift)).unwrap();
        let b = run_strong_experiment(&cfg, &m, &d2.drift, std::slice::from_ref(&d1.drift)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.comparisons.len(), 1);
        let fit = a.fit.unwrap();
        assert!(fit.ci_low <= fit.slope && fit.slope <= fit.ci_high);
        let r = a.refinement.unwrap();
        assert!(r.error_h > 0.0 && r.error_half > 0.0);
    }

    proptest::proptest! {
        #[test]
        fn effective_reps_is_smallest_group_multiple(reps in 1usize..5000, groups in 1usize..64) {
            let c = ExperimentConfig { reps, groups, ..ExperimentConfig::default() };
            let r = c.effective_reps();
            proptest::prop_assert!(r % groups == 0 && r >= reps && r < reps + groups);
        }
    }

    #[test]
    fn linear_model_overrides() {
        let cfg = ExperimentConfig { params: [("kappa".to_string(), 2.0)].into(), ..Default::default() };
        let m = build_model(&cfg).unwrap();
        assert_eq!(m.param("kappa"), Some(2.0));
    }
}
