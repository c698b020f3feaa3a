//! Probabilistic solutions of the nonlocal Poisson equations
//! `L₂(x) u(t, x, ·) + g(t, x, ·) - ḡ(t, x) = 0` and the averaged drifts
//! built from them.
//!
//! `u(t, x, y) = ∫₀^∞ (E g(t, x, Y_s^{x,y}) - ḡ(t, x)) ds` is estimated by a
//! left Riemann sum along frozen trajectories, truncated at
//! `T∞ = (2/β̂) log((1+|y|)/tol)`. Trajectories come in antithetic pairs
//! (noise, -noise), and every query point that a finite difference needs is
//! run as a separate lane driven by the same noise.

pub mod quadrature;
pub mod residual;
pub mod spline;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ergodics::FrozenEnsemble;
use crate::error::{Error, Result};
use crate::integrator::{DriftField, DriftKind};
use crate::model::{ModelSpec, TimeField};
use crate::noise::{fill_increment, RngStream, StableNoiseSpec};
use crate::stats;

pub use quadrature::{fractional_laplacian_1d, fractional_laplacian_1d_detailed, QuadParams, TailModel};
pub use residual::{poisson_residual, tabulate_u_grid, ResidualReport, UGrid};
pub use spline::CubicSpline;

/// Right-hand side `g` of a Poisson problem; one scalar problem per slow
/// component.
#[derive(Clone)]
pub enum Rhs {
    Zero,
    /// The fluctuating slow drift `H`, centered by assumption.
    H,
    /// `b - b̄` with `b̄` supplied as a field so shifted `x` can be evaluated.
    BMinusBbar { bbar: Arc<dyn DriftField> },
    /// A user map with its `μ^x`-mean (`None` means centered) and optional
    /// `y`-Jacobian (row-major `d1 × d2`).
    Custom { g: TimeField, mean: Option<Arc<dyn DriftField>>, grad_y: Option<TimeField> },
}

impl std::fmt::Debug for Rhs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rhs::Zero => "Zero",
            Rhs::H => "H",
            Rhs::BMinusBbar { .. } => "BMinusBbar",
            Rhs::Custom { .. } => "Custom",
        })
    }
}

impl Rhs {
    fn eval(&self, m: &ModelSpec, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            Rhs::Zero => out.fill(0.0),
            Rhs::H => (m.h)(t, x, y, out),
            Rhs::BMinusBbar { .. } => (m.b)(t, x, y, out),
            Rhs::Custom { g, .. } => g(t, x, y, out),
        }
    }

    /// `ḡ(t, x)`; the subtraction is done once per lane.
    fn mean(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Rhs::Zero | Rhs::H | Rhs::Custom { mean: None, .. } => out.fill(0.0),
            Rhs::BMinusBbar { bbar } => bbar.eval(t, x, out),
            Rhs::Custom { mean: Some(f), .. } => f.eval(t, x, out),
        }
    }

    fn grad_y(&self, m: &ModelSpec) -> Result<Option<TimeField>> {
        let missing = |what: &str| Error::Prerequisite(format!("flow mode needs the analytic Jacobian {what}"));
        match self {
            Rhs::Zero => Ok(None),
            Rhs::H => m.grad_h_y.clone().map(Some).ok_or_else(|| missing("grad_h_y")),
            Rhs::BMinusBbar { .. } => m.grad_b_y.clone().map(Some).ok_or_else(|| missing("grad_b_y")),
            Rhs::Custom { grad_y, .. } => grad_y.clone().map(Some).ok_or_else(|| missing("of the custom rhs")),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Rhs::Zero)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    Flow,
    Fd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorParams {
    pub tol: f64,
    /// Number of antithetic pairs.
    pub reps: usize,
    pub h: f64,
    pub fd_step: f64,
    pub richardson: bool,
    /// Cap on `T∞`.
    pub max_horizon: f64,
}

impl Default for CorrectorParams {
    fn default() -> Self {
        Self { tol: 1e-3, reps: 200, h: 0.01, fd_step: 1e-2, richardson: true, max_horizon: 200.0 }
    }
}

/// Ensemble-side facts a corrector estimate depends on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectorContext {
    /// Fitted contraction rate `β̂/2` from the contraction diagnostic.
    pub rate: Option<f64>,
    /// Centering check of `H` at the query anchor: (estimate, se).
    pub centering: Option<(Vec<f64>, Vec<f64>)>,
    /// `E_μ|y|`, used in the truncation bound; estimated on the fly if absent.
    pub mean_abs_y: Option<f64>,
}

impl CorrectorContext {
    pub fn new(rate: f64) -> Self {
        Self { rate: Some(rate), ..Self::default() }
    }

    pub fn with_centering(mut self, est: Vec<f64>, se: Vec<f64>) -> Self {
        self.centering = Some((est, se));
        self
    }

    pub fn with_mean_abs_y(mut self, v: f64) -> Self {
        self.mean_abs_y = Some(v);
        self
    }

    fn rate(&self) -> Result<f64> {
        match self.rate {
            Some(r) if r > 0.0 && r.is_finite() => Ok(r),
            Some(r) => Err(Error::Prerequisite(format!("contraction rate must be positive, got {r}"))),
            None => Err(Error::Prerequisite(
                "no contraction rate estimate; run contraction_diagnostic first".into(),
            )),
        }
    }

    fn check_rhs(&self, rhs: &Rhs) -> Result<()> {
        if let Rhs::H = rhs {
            let (est, se) = self.centering.as_ref().ok_or_else(|| {
                Error::Prerequisite("rhs H needs a centering check (check_centering) first".into())
            })?;
            for (e, s) in est.iter().zip(se) {
                if e.abs() > 3.0 * s + 1e-12 {
                    return Err(Error::Model(format!(
                        "centering condition fails: ensemble mean of H is {e} with se {s}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Monte Carlo values of `u`, `∇_y u`, `∇_x u` at one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectorEstimate {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub u_se: Vec<f64>,
    /// Row-major `d1 × d2`; empty unless requested.
    pub grad_y: Vec<f64>,
    pub grad_y_se: Vec<f64>,
    /// Row-major `d1 × d1`; empty unless requested.
    pub grad_x: Vec<f64>,
    pub grad_x_se: Vec<f64>,
    pub horizon: f64,
    /// Bound on `|u - u_{T∞}|` from the exponential-ergodicity envelope.
    pub truncation_bound: f64,
    /// Same for gradient entries.
    pub grad_truncation_bound: f64,
    /// Number of trajectories (two per antithetic pair).
    pub replicates: usize,
    pub mode: Option<GradMode>,
    pub richardson: bool,
}

#[derive(Clone)]
struct Lane {
    x: Vec<f64>,
    y0: Vec<f64>,
    gbar: Vec<f64>,
}

#[derive(Default)]
struct PairOut {
    /// Per lane, antithetic average of `Σ h (g - ḡ)`.
    fine: Vec<Vec<f64>>,
    /// Same on the grid `2h` driven by summed increments.
    coarse: Vec<Vec<f64>>,
    /// Antithetic average of `Σ h ∇_y g J` for lane 0.
    flow: Vec<f64>,
    lip: f64,
    abs_y_sum: f64,
    abs_y_count: usize,
}

struct RunSpec<'a> {
    model: &'a ModelSpec,
    rhs: &'a Rhs,
    t: f64,
    lanes: &'a [Lane],
    n: usize,
    h: f64,
    flow: bool,
    coarse: bool,
    grad_g: Option<TimeField>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Frobenius norm of `∇_y g` along lane 0, or a difference quotient.
fn local_lip(spec: &RunSpec<'_>, x: &[f64], y: &[f64], gbuf: &mut [f64], gbuf2: &mut [f64], ybuf: &mut [f64]) -> f64 {
    let m = spec.model;
    if let Some(gg) = &spec.grad_g {
        let mut jac = vec![0.0; m.d1 * m.d2];
        gg(spec.t, x, y, &mut jac);
        return norm(&jac);
    }
    let mut acc = 0.0;
    spec.rhs.eval(m, spec.t, x, y, gbuf);
    for j in 0..y.len() {
        let d = 1e-6 * (1.0 + y[j].abs());
        ybuf.copy_from_slice(y);
        ybuf[j] += d;
        spec.rhs.eval(m, spec.t, x, ybuf, gbuf2);
        acc += gbuf.iter().zip(gbuf2.iter()).map(|(a, b)| ((b - a) / d).powi(2)).sum::<f64>();
    }
    acc.sqrt()
}

fn run_pair(spec: &RunSpec<'_>, stream: RngStream) -> Result<PairOut> {
    let m = spec.model;
    let (d1, d2) = (m.d1, m.d2);
    let nl = spec.lanes.len();
    let noise = StableNoiseSpec::standard(m.alpha2, d2)?;
    let mut rng = stream.rng();
    // states: [sign][lane]
    let mut ys: Vec<Vec<Vec<f64>>> = (0..2).map(|_| spec.lanes.iter().map(|l| l.y0.clone()).collect()).collect();
    let mut yc = ys.clone();
    let mut fine = vec![vec![0.0; d1]; nl];
    let mut coarse = vec![vec![0.0; d1]; nl];
    let mut flow = vec![0.0; d1 * d2];
    let mut jac: Vec<Vec<f64>> = (0..2).map(|_| identity(d2)).collect();
    let mut g = vec![0.0; d1];
    let mut g2 = vec![0.0; d1];
    let mut fy = vec![0.0; d2];
    let mut ybuf = vec![0.0; d2];
    let mut dl = vec![0.0; d2];
    let mut dl_acc = vec![0.0; d2];
    let mut gfy = vec![0.0; d2 * d2];
    let mut ggy = vec![0.0; d1 * d2];
    let mut tmp = vec![0.0; d2 * d2];
    let mut out = PairOut { lip: 0.0, ..PairOut::default() };
    let h = spec.h;
    let half_n = spec.n / 2;
    for k in 0..spec.n {
        fill_increment(&noise, h, &mut rng, &mut dl);
        for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
            for (li, lane) in spec.lanes.iter().enumerate() {
                let y = &mut ys[s][li];
                spec.rhs.eval(m, spec.t, &lane.x, y, &mut g);
                for i in 0..d1 {
                    fine[li][i] += 0.5 * h * (g[i] - lane.gbar[i]);
                }
                if li == 0 {
                    if k % 8 == 0 {
                        out.lip = out.lip.max(local_lip(spec, &lane.x, y, &mut g, &mut g2, &mut ybuf));
                    }
                    if k >= half_n {
                        out.abs_y_sum += norm(y);
                        out.abs_y_count += 1;
                    }
                    if spec.flow {
                        // Σ h ∇_y g(Y_k) J_k, then J_{k+1} = J_k + h ∇_y f(Y_k) J_k
                        if let Some(gg) = &spec.grad_g {
                            gg(spec.t, &lane.x, y, &mut ggy);
                            matmul(&ggy, &jac[s], d1, d2, d2, &mut tmp[..d1 * d2]);
                            for (f, v) in flow.iter_mut().zip(&tmp[..d1 * d2]) {
                                *f += 0.5 * h * v;
                            }
                        }
                        let gf = m.grad_f_y.as_ref().expect("checked by caller");
                        gf(&lane.x, y, &mut gfy);
                        matmul(&gfy, &jac[s], d2, d2, d2, &mut tmp);
                        for (j, v) in jac[s].iter_mut().zip(&tmp) {
                            *j += h * v;
                        }
                    }
                }
                (m.f)(&lane.x, y, &mut fy);
                for j in 0..d2 {
                    y[j] += fy[j] * h + sign * dl[j];
                }
                if !(norm(y) <= crate::integrator::BLOW_UP_LIMIT) {
                    return Err(Error::BlowUp { step: k + 1, detail: format!("corrector lane {li}") });
                }
            }
        }
        if spec.coarse {
            if k % 2 == 0 {
                dl_acc.copy_from_slice(&dl);
            } else {
                for j in 0..d2 {
                    dl_acc[j] += dl[j];
                }
                for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                    for (li, lane) in spec.lanes.iter().enumerate() {
                        let y = &mut yc[s][li];
                        spec.rhs.eval(m, spec.t, &lane.x, y, &mut g);
                        for i in 0..d1 {
                            coarse[li][i] += h * (g[i] - lane.gbar[i]);
                        }
                        (m.f)(&lane.x, y, &mut fy);
                        for j in 0..d2 {
                            y[j] += fy[j] * 2.0 * h + sign * dl_acc[j];
                        }
                    }
                }
            }
        }
    }
    out.fine = fine;
    out.coarse = coarse;
    out.flow = flow;
    Ok(out)
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// `out (r×c) = a (r×k) · b (k×c)`, row-major.
fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * c + j];
            }
            out[i * c + j] = s;
        }
    }
}

fn horizon(ctx_rate: f64, y: &[f64], p: &CorrectorParams) -> f64 {
    ((1.0 + norm(y)) / p.tol).ln().max(1.0) / ctx_rate
}

fn check_params(p: &CorrectorParams, model: &ModelSpec, x: &[f64], y: &[f64]) -> Result<()> {
    if p.reps < 2 {
        return Err(Error::Argument("corrector needs at least two antithetic pairs".into()));
    }
    if !(p.h > 0.0 && p.tol > 0.0 && p.tol < 1.0) {
        return Err(Error::Argument(format!("invalid corrector step {} or tolerance {}", p.h, p.tol)));
    }
    if x.len() != model.d1 || y.len() != model.d2 {
        return Err(Error::Argument("query point has the wrong dimension".into()));
    }
    Ok(())
}

fn make_lane(rhs: &Rhs, t: f64, x: Vec<f64>, y0: Vec<f64>, d1: usize) -> Lane {
    let mut gbar = vec![0.0; d1];
    rhs.mean(t, &x, &mut gbar);
    Lane { x, y0, gbar }
}

/// Lanes for the requested finite differences: base, then for each `y_j`
/// (and then each `x_i`) the offsets `+δ, -δ` and, with Richardson,
/// `+δ/2, -δ/2`.
fn build_lanes(rhs: &Rhs, t: f64, x: &[f64], y: &[f64], d1: usize, fd_y: bool, fd_x: bool, p: &CorrectorParams) -> Vec<Lane> {
    let mut lanes = vec![make_lane(rhs, t, x.to_vec(), y.to_vec(), d1)];
    let offsets: Vec<f64> = if p.richardson {
        vec![p.fd_step, -p.fd_step, 0.5 * p.fd_step, -0.5 * p.fd_step]
    } else {
        vec![p.fd_step, -p.fd_step]
    };
    if fd_y {
        for j in 0..y.len() {
            for &o in &offsets {
                let mut yy = y.to_vec();
                yy[j] += o;
                lanes.push(make_lane(rhs, t, x.to_vec(), yy, d1));
            }
        }
    }
    if fd_x {
        for i in 0..x.len() {
            for &o in &offsets {
                let mut xx = x.to_vec();
                xx[i] += o;
                lanes.push(make_lane(rhs, t, xx, y.to_vec(), d1));
            }
        }
    }
    lanes
}

struct Collected {
    pairs: Vec<PairOut>,
    horizon: f64,
    lip: f64,
    mean_abs_y: f64,
}

#[allow(clippy::too_many_arguments)]
fn collect(
    model: &ModelSpec,
    rhs: &Rhs,
    t: f64,
    y: &[f64],
    lanes: &[Lane],
    flow: bool,
    ctx: &CorrectorContext,
    p: &CorrectorParams,
    stream: RngStream,
) -> Result<Collected> {
    let rate = ctx.rate()?;
    let horizon = horizon(rate, y, p).min(p.max_horizon);
    let n = ((horizon / p.h).ceil() as usize).max(2);
    let grad_g = if flow { rhs.grad_y(model)? } else { None };
    if flow && model.grad_f_y.is_none() {
        return Err(Error::Prerequisite("flow mode needs the analytic Jacobian grad_f_y".into()));
    }
    let spec = RunSpec { model, rhs, t, lanes, n, h: p.h, flow, coarse: false, grad_g: grad_g.clone() };
    let pairs: Vec<PairOut> = (0..p.reps)
        .into_par_iter()
        .map(|r| run_pair(&spec, stream.substream(r as u64)))
        .collect::<Result<_>>()?;
    let lip = pairs.iter().map(|o| o.lip).fold(0.0, f64::max);
    let mean_abs_y = ctx.mean_abs_y.unwrap_or_else(|| {
        let s: f64 = pairs.iter().map(|o| o.abs_y_sum).sum();
        let c: usize = pairs.iter().map(|o| o.abs_y_count).sum();
        if c == 0 { 0.0 } else { s / c as f64 }
    });
    Ok(Collected { pairs, horizon: n as f64 * p.h, lip, mean_abs_y })
}

fn mean_se(vals: &[f64]) -> (f64, f64) {
    let v0 = vals[0];
    let dev: Vec<f64> = vals.iter().map(|v| v - v0).collect();
    (v0 + stats::mean(&dev), stats::standard_error(&dev))
}

/// Per-pair finite-difference derivative from lanes `base..base+4` (or 2).
fn fd_per_pair(pairs: &[PairOut], base: usize, comp: usize, p: &CorrectorParams) -> Vec<f64> {
    let d = p.fd_step;
    pairs
        .iter()
        .map(|o| {
            let big = (o.fine[base][comp] - o.fine[base + 1][comp]) / (2.0 * d);
            if p.richardson {
                let small = (o.fine[base + 2][comp] - o.fine[base + 3][comp]) / d;
                (4.0 * small - big) / 3.0
            } else {
                big
            }
        })
        .collect()
}

fn base_estimate(model: &ModelSpec, t: f64, x: &[f64], y: &[f64], c: &Collected, ctx: &CorrectorContext, p: &CorrectorParams) -> Result<CorrectorEstimate> {
    let rate = ctx.rate()?;
    let d1 = model.d1;
    let mut u = vec![0.0; d1];
    let mut u_se = vec![0.0; d1];
    for i in 0..d1 {
        let vals: Vec<f64> = c.pairs.iter().map(|o| o.fine[0][i]).collect();
        (u[i], u_se[i]) = mean_se(&vals);
    }
    let decay = (-rate * c.horizon).exp();
    Ok(CorrectorEstimate {
        t,
        x: x.to_vec(),
        y: y.to_vec(),
        u,
        u_se,
        grad_y: Vec::new(),
        grad_y_se: Vec::new(),
        grad_x: Vec::new(),
        grad_x_se: Vec::new(),
        horizon: c.horizon,
        truncation_bound: c.lip / rate * decay * (norm(y) + c.mean_abs_y),
        grad_truncation_bound: 2.0 * c.lip / rate * decay,
        replicates: 2 * c.pairs.len(),
        mode: None,
        richardson: p.richardson,
    })
}

/// Monte Carlo estimate of the corrector `u(t, x, y)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_u(
    model: &ModelSpec,
    rhs: &Rhs,
    t: f64,
    x: &[f64],
    y: &[f64],
    ctx: &CorrectorContext,
    params: &CorrectorParams,
    stream: RngStream,
) -> Result<CorrectorEstimate> {
    check_params(params, model, x, y)?;
    ctx.rate()?;
    ctx.check_rhs(rhs)?;
    if rhs.is_zero() {
        return Ok(zero_estimate(model, t, x, y, ctx, params, false, false));
    }
    let lanes = build_lanes(rhs, t, x, y, model.d1, false, false, params);
    let c = collect(model, rhs, t, y, &lanes, false, ctx, params, stream)?;
    base_estimate(model, t, x, y, &c, ctx, params)
}

#[allow(clippy::too_many_arguments)]
fn zero_estimate(model: &ModelSpec, t: f64, x: &[f64], y: &[f64], ctx: &CorrectorContext, p: &CorrectorParams, gy: bool, gx: bool) -> CorrectorEstimate {
    let (d1, d2) = (model.d1, model.d2);
    let rate = ctx.rate.unwrap_or(1.0);
    let nz = |on: bool, n: usize| if on { vec![0.0; n] } else { Vec::new() };
    CorrectorEstimate {
        t,
        x: x.to_vec(),
        y: y.to_vec(),
        u: vec![0.0; d1],
        u_se: vec![0.0; d1],
        grad_y: nz(gy, d1 * d2),
        grad_y_se: nz(gy, d1 * d2),
        grad_x: nz(gx, d1 * d1),
        grad_x_se: nz(gx, d1 * d1),
        horizon: horizon(rate, y, p).min(p.max_horizon),
        truncation_bound: 0.0,
        grad_truncation_bound: 0.0,
        replicates: 0,
        mode: None,
        richardson: p.richardson,
    }
}

/// Which gradients to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Want {
    pub y: bool,
    pub x: bool,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grad_internal(
    model: &ModelSpec,
    rhs: &Rhs,
    t: f64,
    x: &[f64],
    y: &[f64],
    mode: GradMode,
    want: Want,
    checked: bool,
    ctx: &CorrectorContext,
    p: &CorrectorParams,
    stream: RngStream,
) -> Result<CorrectorEstimate> {
    check_params(p, model, x, y)?;
    ctx.rate()?;
    ctx.check_rhs(rhs)?;
    if mode == GradMode::Fd && !(p.fd_step > 0.0) {
        return Err(Error::Argument(format!("fd_step must be positive, got {}", p.fd_step)));
    }
    if mode == GradMode::Flow && want.y {
        if model.grad_f_y.is_none() {
            return Err(Error::Prerequisite("flow mode needs the analytic Jacobian grad_f_y".into()));
        }
        rhs.grad_y(model)?;
    }
    let (d1, d2) = (model.d1, model.d2);
    if rhs.is_zero() {
        let mut e = zero_estimate(model, t, x, y, ctx, p, want.y, want.x);
        e.mode = Some(mode);
        return Ok(e);
    }
    let fd_y = want.y && mode == GradMode::Fd;
    let flow = want.y && mode == GradMode::Flow;
    let lanes = build_lanes(rhs, t, x, y, d1, fd_y, want.x, p);
    let c = collect(model, rhs, t, y, &lanes, flow, ctx, p, stream)?;
    let mut est = base_estimate(model, t, x, y, &c, ctx, p)?;
    est.mode = Some(mode);
    let per_dir = if p.richardson { 4 } else { 2 };
    let ill = |vals: &[Vec<f64>], what: String| -> Result<()> {
        // raw ±δ difference of u against its Monte Carlo noise
        let diffs: Vec<f64> = vals.iter().map(|v| v[0] - v[1]).collect();
        let (m, se) = mean_se(&diffs);
        if checked && se > 0.0 && m.abs() < 10.0 * se {
            return Err(Error::IllConditioned(format!(
                "{what}: difference {m:.3e} is below 10 standard errors ({se:.3e}); increase fd_step or reps"
            )));
        }
        Ok(())
    };
    if want.y {
        let mut gy = vec![0.0; d1 * d2];
        let mut gy_se = vec![0.0; d1 * d2];
        if flow {
            for k in 0..d1 * d2 {
                let vals: Vec<f64> = c.pairs.iter().map(|o| o.flow[k]).collect();
                (gy[k], gy_se[k]) = mean_se(&vals);
            }
        } else {
            for j in 0..d2 {
                let base = 1 + j * per_dir;
                for i in 0..d1 {
                    let raw: Vec<Vec<f64>> =
                        c.pairs.iter().map(|o| vec![o.fine[base][i], o.fine[base + 1][i]]).collect();
                    ill(&raw, format!("d u_{i} / d y_{j}"))?;
                    let vals = fd_per_pair(&c.pairs, base, i, p);
                    (gy[i * d2 + j], gy_se[i * d2 + j]) = mean_se(&vals);
                }
            }
        }
        est.grad_y = gy;
        est.grad_y_se = gy_se;
    }
    if want.x {
        let offset = 1 + if fd_y { d2 * per_dir } else { 0 };
        let mut gx = vec![0.0; d1 * d1];
        let mut gx_se = vec![0.0; d1 * d1];
        for j in 0..d1 {
            let base = offset + j * per_dir;
            for i in 0..d1 {
                let raw: Vec<Vec<f64>> = c.pairs.iter().map(|o| vec![o.fine[base][i], o.fine[base + 1][i]]).collect();
                ill(&raw, format!("d u_{i} / d x_{j}"))?;
                let vals = fd_per_pair(&c.pairs, base, i, p);
                (gx[i * d1 + j], gx_se[i * d1 + j]) = mean_se(&vals);
            }
        }
        est.grad_x = gx;
        est.grad_x_se = gx_se;
    }
    Ok(est)
}

/// `∇_y u` (flow or finite differences) and `∇_x u` (finite differences
/// always, since `x` also moves `μ^x`).
#[allow(clippy::too_many_arguments)]
pub fn estimate_grad_u(
    model: &ModelSpec,
    rhs: &Rhs,
    t: f64,
    x: &[f64],
    y: &[f64],
    mode: GradMode,
    ctx: &CorrectorContext,
    params: &CorrectorParams,
    stream: RngStream,
) -> Result<CorrectorEstimate> {
    grad_internal(model, rhs, t, x, y, mode, Want { y: true, x: true }, true, ctx, params, stream)
}

/// Value and nested Monte Carlo SE of an averaged corrector drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedEstimate {
    pub kind: DriftKind,
    pub t: f64,
    pub x: Vec<f64>,
    pub value: Vec<f64>,
    pub se: Vec<f64>,
    /// Ensemble states used.
    pub samples: usize,
    /// Mean of the per-sample gradient SEs (inner Monte Carlo part).
    pub inner_se: Vec<f64>,
    /// Mean over states of the horizon-truncation bound on `G`.
    pub truncation_bound: f64,
}

/// `c̄(t,x) = ∫ ∇_y u · c dμ^x` or `H̄(t,x) = ∫ ∇_x u · H dμ^x` with `u` the
/// corrector of `H`, averaged over `n_samples` evenly spaced ensemble states.
#[allow(clippy::too_many_arguments)]
pub fn averaged_corrector(
    model: &ModelSpec,
    kind: DriftKind,
    t: f64,
    x: &[f64],
    ensemble: &FrozenEnsemble,
    n_samples: usize,
    mode: GradMode,
    ctx: &CorrectorContext,
    params: &CorrectorParams,
    stream: RngStream,
) -> Result<AveragedEstimate> {
    ensemble.require_anchor(x)?;
    if kind == DriftKind::Bbar {
        return Err(Error::Argument("b̄ is an ensemble average; use estimate_bbar".into()));
    }
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be at least 1".into()));
    }
    let (d1, d2) = (model.d1, model.d2);
    let m = n_samples.min(ensemble.len());
    let want = match kind {
        DriftKind::Cbar => Want { y: true, x: false },
        _ => Want { y: false, x: true },
    };
    let mut ctx = ctx.clone();
    if ctx.mean_abs_y.is_none() {
        ctx.mean_abs_y = Some(ensemble.average(norm).0);
    }
    let per: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..m)
        .map(|s| {
            let y = ensemble.get(s * ensemble.len() / m);
            let est = grad_internal(model, &Rhs::H, t, x, y, mode, want, false, &ctx, params, stream.substream(s as u64))?;
            let mut g = vec![0.0; d1];
            let mut gse = vec![0.0; d1];
            let weight;
            match kind {
                DriftKind::Cbar => {
                    let mut c = vec![0.0; d2];
                    (model.c)(x, y, &mut c);
                    weight = norm(&c);
                    for i in 0..d1 {
                        for j in 0..d2 {
                            g[i] += est.grad_y[i * d2 + j] * c[j];
                            gse[i] += (est.grad_y_se[i * d2 + j] * c[j]).powi(2);
                        }
                    }
                }
                _ => {
                    let mut hv = vec![0.0; d1];
                    (model.h)(t, x, y, &mut hv);
                    weight = norm(&hv);
                    for i in 0..d1 {
                        for j in 0..d1 {
                            g[i] += est.grad_x[i * d1 + j] * hv[j];
                            gse[i] += (est.grad_x_se[i * d1 + j] * hv[j]).powi(2);
                        }
                    }
                }
            }
            let tb = est.grad_truncation_bound * weight * (d1 as f64).sqrt();
            Ok((g, gse.into_iter().map(f64::sqrt).collect(), tb))
        })
        .collect::<Result<_>>()?;
    let mut value = vec![0.0; d1];
    let mut se = vec![0.0; d1];
    let mut inner = vec![0.0; d1];
    for i in 0..d1 {
        let vals: Vec<f64> = per.iter().map(|(g, _, _)| g[i]).collect();
        // spread across states already carries the inner noise of each G_m
        (value[i], se[i]) = mean_se(&vals);
        inner[i] = stats::mean(&per.iter().map(|(_, s, _)| s[i]).collect::<Vec<_>>());
    }
    let truncation_bound = stats::mean(&per.iter().map(|p| p.2).collect::<Vec<_>>());
    Ok(AveragedEstimate { kind, t, x: x.to_vec(), value, se, samples: m, inner_se: inner, truncation_bound })
}

pub(crate) use run_pair_grid::run_grid_pairs;

mod run_pair_grid {
    //! Many query points as lanes of one set of antithetic pairs, used for
    //! corrector tabulation on a `y` grid.
    use super::*;

    pub(crate) struct GridRun {
        /// `[pair][node][component]` on the step `h`.
        pub fine: Vec<Vec<Vec<f64>>>,
        /// Same on the step `2h` with summed increments.
        pub coarse: Vec<Vec<Vec<f64>>>,
        pub horizon: f64,
        pub lip: f64,
        pub mean_abs_y: f64,
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run_grid_pairs(
        model: &ModelSpec,
        rhs: &Rhs,
        t: f64,
        x: &[f64],
        nodes: &[f64],
        horizon: f64,
        p: &CorrectorParams,
        stream: RngStream,
    ) -> Result<GridRun> {
        let lanes: Vec<Lane> = nodes.iter().map(|&y| make_lane(rhs, t, x.to_vec(), vec![y], model.d1)).collect();
        let mut n = ((horizon / p.h).ceil() as usize).max(2);
        n += n % 2;
        let spec = RunSpec { model, rhs, t, lanes: &lanes, n, h: p.h, flow: false, coarse: true, grad_g: None };
        let pairs: Vec<PairOut> = (0..p.reps)
            .into_par_iter()
            .map(|r| run_pair(&spec, stream.substream(r as u64)))
            .collect::<Result<_>>()?;
        let lip = pairs.iter().map(|o| o.lip).fold(0.0, f64::max);
        let s: f64 = pairs.iter().map(|o| o.abs_y_sum).sum();
        let c: usize = pairs.iter().map(|o| o.abs_y_count).sum();
        Ok(GridRun {
            horizon: n as f64 * p.h,
            lip,
            mean_abs_y: if c == 0 { 0.0 } else { s / c as f64 },
            fine: pairs.iter().map(|o| o.fine.clone()).collect(),
            coarse: pairs.into_iter().map(|o| o.coarse).collect(),
        })
    }
}
