//! Explicit jump-Euler time stepping of the coupled, frozen and averaged
//! equations.
//!
//! The coupled scheme is
//!
//! ```text
//! X ← X + b h + (h/γ) H + ΔL¹
//! Y ← Y + (h/η) f + (h/β) c + η^{-1/α₂} ΔL²
//! ```
//!
//! with both right-hand sides evaluated at the old state. Driving increments
//! are standard (unit-scale) stable increments over `h`, and the `ΔL¹` rows
//! are recorded so averaged equations can be run on the same noise.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AveragedField, ModelSpec, Regime, ScaleSchedule};
use crate::noise::{fill_increment, RngStream, StableNoiseSpec, StreamRng};

/// States with a coordinate beyond this magnitude abort the run.
pub const BLOW_UP_LIMIT: f64 = 1e12;

/// `h = η_ε / κ_cfl`.
pub fn choose_step(eps: f64, schedule: &ScaleSchedule, kappa_cfl: f64) -> f64 {
    schedule.eta(eps) / kappa_cfl
}

/// Largest step `≤ h_max` that divides `t_end`, with its step count.
pub fn fit_step(t_end: f64, h_max: f64) -> Result<(usize, f64)> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::Argument(format!("horizon must be positive, got {t_end}")));
    }
    if !(h_max > 0.0 && h_max.is_finite()) {
        return Err(Error::Argument(format!("step must be positive, got {h_max}")));
    }
    let ratio = t_end / h_max;
    let n = if (ratio - ratio.round()).abs() <= 1e-9 * ratio { ratio.round() } else { ratio.ceil() };
    Ok((n.max(1.0) as usize, t_end / n.max(1.0)))
}

fn grid_steps(t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::Argument(format!("horizon must be positive, got {t_end}")));
    }
    let ratio = t_end / h;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-6 * ratio.max(1.0) || n < 1.0 {
        return Err(Error::Argument(format!("T/h = {ratio} is not an integer")));
    }
    Ok(n as usize)
}

fn times(n: usize, h: f64) -> Vec<f64> {
    (0..=n).map(|k| k as f64 * h).collect()
}

fn guard(step: usize, state: &[f64], what: &str) -> Result<()> {
    if let Some(v) = state.iter().find(|v| !(v.abs() <= BLOW_UP_LIMIT)) {
        return Err(Error::BlowUp { step, detail: format!("{what} component reached {v}") });
    }
    Ok(())
}

/// Standard driving increments over a fixed step: row `k` of `dl1` and `dl2`
/// drives step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub h: f64,
    pub dl1: Array2<f64>,
    pub dl2: Array2<f64>,
}

impl NoisePath {
    /// Draw `n` steps for `model`'s drivers. Per step, the `L¹` increment is
    /// drawn before the `L²` increment from a single generator.
    pub fn generate(model: &ModelSpec, n: usize, h: f64, stream: RngStream) -> Result<Self> {
        let mut rng = stream.rng();
        Self::generate_with(model, n, h, &mut rng)
    }

    pub(crate) fn generate_with(model: &ModelSpec, n: usize, h: f64, rng: &mut StreamRng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("noise path needs at least one step".into()));
        }
        let s1 = StableNoiseSpec::standard(model.alpha1, model.d1)?;
        let s2 = StableNoiseSpec::standard(model.alpha2, model.d2)?;
        let mut dl1 = Array2::zeros((n, model.d1));
        let mut dl2 = Array2::zeros((n, model.d2));
        for k in 0..n {
            fill_increment(&s1, h, rng, dl1.row_mut(k).as_slice_mut().expect("contiguous row"));
            fill_increment(&s2, h, rng, dl2.row_mut(k).as_slice_mut().expect("contiguous row"));
        }
        Ok(Self { h, dl1, dl2 })
    }

    /// Noise path with every increment zero.
    pub fn zero(d1: usize, d2: usize, n: usize, h: f64) -> Self {
        Self { h, dl1: Array2::zeros((n, d1)), dl2: Array2::zeros((n, d2)) }
    }

    pub fn len(&self) -> usize {
        self.dl1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same driving paths on the grid with step `2h` (sums of adjacent rows).
    pub fn coarsen(&self) -> Result<Self> {
        let n = self.len();
        if n % 2 != 0 || n == 0 {
            return Err(Error::Argument(format!("cannot coarsen a path with {n} steps")));
        }
        let pair = |a: &Array2<f64>| {
            let mut out = Array2::zeros((n / 2, a.ncols()));
            for k in 0..n / 2 {
                let s = &a.row(2 * k) + &a.row(2 * k + 1);
                out.row_mut(k).assign(&s);
            }
            out
        };
        Ok(Self { h: 2.0 * self.h, dl1: pair(&self.dl1), dl2: pair(&self.dl2) })
    }
}

/// Discretized trajectory of the coupled system.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPath {
    pub times: Vec<f64>,
    pub xs: Array2<f64>,
    pub ys: Array2<f64>,
    /// Recorded `ΔL¹`, one row per step.
    pub l1_increments: Array2<f64>,
    pub eps: f64,
    pub h: f64,
    pub schedule: ScaleSchedule,
    pub stream: Option<RngStream>,
}

impl CoupledPath {
    pub fn terminal_x(&self) -> Vec<f64> {
        self.xs.row(self.xs.nrows() - 1).to_vec()
    }
}

/// One-step map of the coupled scheme with precomputed scale factors.
pub(crate) struct CoupledKernel<'a> {
    model: &'a ModelSpec,
    h: f64,
    slow_h: f64,
    fast_f: f64,
    fast_c: f64,
    fast_amp: f64,
    bx: Vec<f64>,
    hx: Vec<f64>,
    fy: Vec<f64>,
    cy: Vec<f64>,
}

impl<'a> CoupledKernel<'a> {
    pub(crate) fn new(model: &'a ModelSpec, schedule: &ScaleSchedule, eps: f64, h: f64) -> Result<Self> {
        let (gamma, eta, beta) = (schedule.gamma(eps), schedule.eta(eps), schedule.beta(eps));
        if !(eps > 0.0) {
            return Err(Error::Argument(format!("eps must be positive, got {eps}")));
        }
        if h > eta * (1.0 + 1e-12) {
            return Err(Error::Argument(format!("step h = {h} exceeds eta = {eta}")));
        }
        Ok(Self {
            model,
            h,
            slow_h: h / gamma,
            fast_f: h / eta,
            fast_c: h / beta,
            fast_amp: eta.powf(-1.0 / model.alpha2),
            bx: vec![0.0; model.d1],
            hx: vec![0.0; model.d1],
            fy: vec![0.0; model.d2],
            cy: vec![0.0; model.d2],
        })
    }

    #[inline]
    pub(crate) fn step(&mut self, t: f64, x: &mut [f64], y: &mut [f64], dl1: &[f64], dl2: &[f64]) {
        let m = self.model;
        (m.b)(t, x, y, &mut self.bx);
        (m.h)(t, x, y, &mut self.hx);
        (m.f)(x, y, &mut self.fy);
        (m.c)(x, y, &mut self.cy);
        for i in 0..x.len() {
            x[i] += self.bx[i] * self.h + self.slow_h * self.hx[i] + dl1[i];
        }
        for j in 0..y.len() {
            y[j] += self.fast_f * self.fy[j] + self.fast_c * self.cy[j] + self.fast_amp * dl2[j];
        }
    }
}

fn check_initial(model: &ModelSpec, x0: &[f64], y0: &[f64]) -> Result<()> {
    if x0.len() != model.d1 || y0.len() != model.d2 {
        return Err(Error::Argument(format!(
            "initial data has dimensions ({}, {}), model expects ({}, {})",
            x0.len(),
            y0.len(),
            model.d1,
            model.d2
        )));
    }
    Ok(())
}

/// Simulate the coupled system on `[0, T]` with step `h` and fresh noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    model: &ModelSpec,
    schedule: &ScaleSchedule,
    eps: f64,
    x0: &[f64],
    y0: &[f64],
    t_end: f64,
    h: f64,
    stream: RngStream,
) -> Result<CoupledPath> {
    let n = grid_steps(t_end, h)?;
    let noise = NoisePath::generate(model, n, h, stream)?;
    let mut path = simulate_coupled_with_noise(model, schedule, eps, x0, y0, &noise)?;
    path.stream = Some(stream);
    Ok(path)
}

/// Simulate the coupled system driven by a prescribed noise path.
pub fn simulate_coupled_with_noise(
    model: &ModelSpec,
    schedule: &ScaleSchedule,
    eps: f64,
    x0: &[f64],
    y0: &[f64],
    noise: &NoisePath,
) -> Result<CoupledPath> {
    check_initial(model, x0, y0)?;
    if noise.dl1.ncols() != model.d1 || noise.dl2.ncols() != model.d2 {
        return Err(Error::Argument("noise path dimensions do not match the model".into()));
    }
    let n = noise.len();
    let h = noise.h;
    let mut kernel = CoupledKernel::new(model, schedule, eps, h)?;
    let mut xs = Array2::zeros((n + 1, model.d1));
    let mut ys = Array2::zeros((n + 1, model.d2));
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    xs.row_mut(0).assign(&ndarray::aview1(&x));
    ys.row_mut(0).assign(&ndarray::aview1(&y));
    for k in 0..n {
        let dl1 = noise.dl1.row(k);
        let dl2 = noise.dl2.row(k);
        kernel.step(
            k as f64 * h,
            &mut x,
            &mut y,
            dl1.as_slice().expect("contiguous row"),
            dl2.as_slice().expect("contiguous row"),
        );
        guard(k + 1, &x, "slow")?;
        guard(k + 1, &y, "fast")?;
        xs.row_mut(k + 1).assign(&ndarray::aview1(&x));
        ys.row_mut(k + 1).assign(&ndarray::aview1(&y));
    }
    Ok(CoupledPath {
        times: times(n, h),
        xs,
        ys,
        l1_increments: noise.dl1.clone(),
        eps,
        h,
        schedule: *schedule,
        stream: None,
    })
}

/// Run the coupled scheme without storing the path, drawing noise exactly as
/// [`NoisePath::generate`] does. `visit(k, x, y, dl1)` sees the state after
/// step `k = 1..=n` and the `ΔL¹` that drove it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_coupled_streaming(
    model: &ModelSpec,
    schedule: &ScaleSchedule,
    eps: f64,
    x0: &[f64],
    y0: &[f64],
    n: usize,
    h: f64,
    rng: &mut StreamRng,
    mut visit: impl FnMut(usize, &[f64], &[f64], &[f64]) -> Result<()>,
) -> Result<()> {
    check_initial(model, x0, y0)?;
    let s1 = StableNoiseSpec::standard(model.alpha1, model.d1)?;
    let s2 = StableNoiseSpec::standard(model.alpha2, model.d2)?;
    let mut kernel = CoupledKernel::new(model, schedule, eps, h)?;
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut dl1 = vec![0.0; model.d1];
    let mut dl2 = vec![0.0; model.d2];
    for k in 0..n {
        fill_increment(&s1, h, rng, &mut dl1);
        fill_increment(&s2, h, rng, &mut dl2);
        kernel.step(k as f64 * h, &mut x, &mut y, &dl1, &dl2);
        guard(k + 1, &x, "slow")?;
        guard(k + 1, &y, "fast")?;
        visit(k + 1, &x, &y, &dl1)?;
    }
    Ok(())
}

/// Trajectory of the frozen equation `dY = f(x, Y) dt + dL²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPath {
    pub x: Vec<f64>,
    pub times: Vec<f64>,
    pub ys: Array2<f64>,
}

/// Advance the frozen equation `n` steps in place, calling `visit(k, y)`
/// after each step `k = 1..=n`.
pub(crate) fn advance_frozen(
    model: &ModelSpec,
    x: &[f64],
    y: &mut [f64],
    n: usize,
    h: f64,
    rng: &mut StreamRng,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let spec = StableNoiseSpec::standard(model.alpha2, model.d2)?;
    let mut fy = vec![0.0; model.d2];
    let mut dl = vec![0.0; model.d2];
    for k in 1..=n {
        (model.f)(x, y, &mut fy);
        fill_increment(&spec, h, rng, &mut dl);
        for j in 0..y.len() {
            y[j] += fy[j] * h + dl[j];
        }
        guard(k, y, "frozen")?;
        visit(k, y);
    }
    Ok(())
}

pub fn simulate_frozen(
    model: &ModelSpec,
    x: &[f64],
    y0: &[f64],
    t_end: f64,
    h: f64,
    stream: RngStream,
) -> Result<FrozenPath> {
    check_initial(model, x, y0)?;
    let n = grid_steps(t_end, h)?;
    let mut ys = Array2::zeros((n + 1, model.d2));
    ys.row_mut(0).assign(&ndarray::aview1(y0));
    let mut y = y0.to_vec();
    let mut rng = stream.rng();
    advance_frozen(model, x, &mut y, n, h, &mut rng, |k, y| {
        ys.row_mut(k).assign(&ndarray::aview1(y));
    })?;
    Ok(FrozenPath { x: x.to_vec(), times: times(n, h), ys })
}

// ---------------------------------------------------------------------------
// averaged equations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DriftKind {
    Bbar,
    Cbar,
    Hbar,
}

impl DriftKind {
    pub fn label(self) -> &'static str {
        match self {
            DriftKind::Bbar => "bbar",
            DriftKind::Cbar => "cbar",
            DriftKind::Hbar => "hbar",
        }
    }
}

/// The drift components each regime's averaged equation carries.
pub fn regime_drift_kinds(regime: Regime) -> &'static [DriftKind] {
    match regime {
        Regime::R1 => &[DriftKind::Bbar],
        Regime::R2 => &[DriftKind::Bbar, DriftKind::Cbar],
        Regime::R3 => &[DriftKind::Bbar, DriftKind::Hbar],
        Regime::R4 => &[DriftKind::Bbar, DriftKind::Cbar, DriftKind::Hbar],
    }
}

/// A map `(t, x) ↦ R^{d1}` usable as (part of) an averaged drift.
pub trait DriftField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Standard error attached to `eval` at `(t, x)`, if known.
    fn se(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
    fn provenance(&self) -> String {
        "closed form".into()
    }
}

/// Closure-backed drift field.
pub struct FnDrift {
    pub dim: usize,
    pub field: AveragedField,
    pub provenance: String,
}

impl FnDrift {
    pub fn new(dim: usize, field: AveragedField) -> Self {
        Self { dim, field, provenance: "closed form".into() }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)))
    }
}

impl DriftField for FnDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.field)(t, x, out)
    }

    fn provenance(&self) -> String {
        self.provenance.clone()
    }
}

/// Sum of averaged-drift components for one regime.
#[derive(Clone)]
pub struct AveragedDrift {
    pub regime: Regime,
    pub components: Vec<(DriftKind, Arc<dyn DriftField>)>,
    dim: usize,
}

impl std::fmt::Debug for AveragedDrift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kinds: Vec<_> = self.components.iter().map(|(k, d)| (k, d.provenance())).collect();
        f.debug_struct("AveragedDrift").field("regime", &self.regime).field("components", &kinds).finish()
    }
}

impl AveragedDrift {
    /// Validates that the component kinds are exactly the regime's set.
    pub fn for_regime(regime: Regime, components: Vec<(DriftKind, Arc<dyn DriftField>)>) -> Result<Self> {
        let mut kinds: Vec<DriftKind> = components.iter().map(|(k, _)| *k).collect();
        kinds.sort();
        if kinds != regime_drift_kinds(regime) {
            return Err(Error::Configuration(format!(
                "regime {regime} needs drift components {:?}, got {:?}",
                regime_drift_kinds(regime),
                kinds
            )));
        }
        let dim = components[0].1.dim();
        if components.iter().any(|(_, d)| d.dim() != dim) {
            return Err(Error::Argument("drift components disagree on dimension".into()));
        }
        Ok(Self { regime, components, dim })
    }

    pub fn kinds(&self) -> Vec<DriftKind> {
        self.components.iter().map(|(k, _)| *k).collect()
    }

    pub fn component(&self, kind: DriftKind) -> Option<&Arc<dyn DriftField>> {
        self.components.iter().find(|(k, _)| *k == kind).map(|(_, d)| d)
    }
}

impl DriftField for AveragedDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut buf = vec![0.0; out.len()];
        for (_, d) in &self.components {
            d.eval(t, x, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += b;
            }
        }
    }

    fn se(&self, t: f64, x: &[f64]) -> f64 {
        self.components.iter().map(|(_, d)| d.se(t, x).powi(2)).sum::<f64>().sqrt()
    }

    fn provenance(&self) -> String {
        self.components
            .iter()
            .map(|(k, d)| format!("{}: {}", k.label(), d.provenance()))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Driving noise of an averaged equation.
pub enum L1Source<'a> {
    /// Rows recorded by a coupled run.
    Coupled(ArrayView2<'a, f64>),
    /// Fresh standard increments for `alpha1` drawn from a stream.
    Fresh { alpha1: f64, stream: RngStream },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedPath {
    pub times: Vec<f64>,
    pub xs: Array2<f64>,
    pub regime: Option<Regime>,
    pub drift_kind: Vec<DriftKind>,
}

impl AveragedPath {
    pub fn terminal_x(&self) -> Vec<f64> {
        self.xs.row(self.xs.nrows() - 1).to_vec()
    }
}

/// Euler path of `dX̄ = drift(t, X̄) dt + dL¹`.
pub fn simulate_averaged(
    drift: &dyn DriftField,
    x0: &[f64],
    t_end: f64,
    h: f64,
    source: L1Source<'_>,
) -> Result<AveragedPath> {
    let d1 = drift.dim();
    if x0.len() != d1 {
        return Err(Error::Argument(format!("x0 has dimension {}, drift expects {d1}", x0.len())));
    }
    let n = grid_steps(t_end, h)?;
    let fresh;
    let dl1 = match source {
        L1Source::Coupled(rows) => {
            if rows.nrows() != n || rows.ncols() != d1 {
                return Err(Error::Argument(format!(
                    "increment matrix is {}x{}, grid needs {n}x{d1}",
                    rows.nrows(),
                    rows.ncols()
                )));
            }
            rows
        }
        L1Source::Fresh { alpha1, stream } => {
            let spec = StableNoiseSpec::standard(alpha1, d1)?;
            fresh = crate::noise::increment_sequence(&spec, n, h, &stream)?;
            fresh.view()
        }
    };
    let mut xs = Array2::zeros((n + 1, d1));
    let mut x = x0.to_vec();
    let mut dx = vec![0.0; d1];
    xs.row_mut(0).assign(&ndarray::aview1(&x));
    for k in 0..n {
        drift.eval(k as f64 * h, &x, &mut dx);
        let row = dl1.row(k);
        for i in 0..d1 {
            x[i] += dx[i] * h + row[i];
        }
        guard(k + 1, &x, "averaged")?;
        xs.row_mut(k + 1).assign(&ndarray::aview1(&x));
    }
    Ok(AveragedPath { times: times(n, h), xs, regime: None, drift_kind: Vec::new() })
}

/// [`simulate_averaged`] tagged with the regime of an [`AveragedDrift`].
pub fn simulate_averaged_regime(
    drift: &AveragedDrift,
    x0: &[f64],
    t_end: f64,
    h: f64,
    source: L1Source<'_>,
) -> Result<AveragedPath> {
    let mut p = simulate_averaged(drift, x0, t_end, h, source)?;
    p.regime = Some(drift.regime);
    p.drift_kind = drift.kinds();
    Ok(p)
}
