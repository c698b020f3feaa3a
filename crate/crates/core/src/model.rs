//! Coefficient models of the slow-fast system, numeric checks of the
//! structural conditions, and the power-law scale schedules.
//!
//! The system is
//!
//! ```text
//! dX = b(t,X,Y) dt + γ⁻¹ H(t,X,Y) dt + dL¹
//! dY = η⁻¹ f(X,Y) dt + β⁻¹ c(X,Y) dt + η^{-1/α₂} dL²
//! ```
//!
//! with `γ = ε^g`, `η = ε^e`, `β = ε^bexp`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ergodics::FrozenEnsemble;
use crate::error::{Error, Result};
use crate::noise::{check_alpha, standard_symmetric_stable, RngStream, StreamRng};
use crate::stats;

/// `(t, x, y, out)`: coefficients of the slow equation and their Jacobians.
pub type TimeField = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, y, out)`: coefficients of the fast equation and their Jacobians.
pub type StateField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, out)`: an averaged drift.
pub type AveragedField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(x, rng, out)`: one exact draw from the frozen invariant law `μ^x`.
pub type StationarySampler = Arc<dyn Fn(&[f64], &mut StreamRng, &mut [f64]) + Send + Sync>;

/// Declared Hölder exponents; metadata only, never verified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderMeta {
    pub v: f64,
    pub gamma: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for HolderMeta {
    fn default() -> Self {
        Self { v: 1.5, gamma: 0.5, theta1: 1.0, theta2: 1.0 }
    }
}

/// Closed-form ground truth attached to benchmark models.
#[derive(Clone, Default)]
pub struct Analytic {
    pub bbar: Option<AveragedField>,
    pub cbar: Option<AveragedField>,
    pub hbar: Option<AveragedField>,
    /// Corrector `u(t,x,y)` solving `L₂u + H = 0`.
    pub u: Option<TimeField>,
    /// `∇_y u`, row-major `d1 × d2`.
    pub grad_y_u: Option<TimeField>,
    /// `∇_x u`, row-major `d1 × d1`.
    pub grad_x_u: Option<TimeField>,
    pub stationary: Option<StationarySampler>,
}

/// The coefficient quadruple `(b, H, f, c)` with dimensions and metadata.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub d1: usize,
    pub d2: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub b: TimeField,
    pub h: TimeField,
    pub f: StateField,
    pub c: StateField,
    /// `∇_y f`, row-major `d2 × d2`.
    pub grad_f_y: Option<StateField>,
    /// `∇_y H`, row-major `d1 × d2`.
    pub grad_h_y: Option<TimeField>,
    /// `∇_x H`, row-major `d1 × d1`.
    pub grad_h_x: Option<TimeField>,
    /// `∇_y b`, row-major `d1 × d2`.
    pub grad_b_y: Option<TimeField>,
    pub holder: HolderMeta,
    pub analytic: Analytic,
    /// Named scalar parameters, echoed into reports and cache keys.
    pub params: Vec<(String, f64)>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("d1", &self.d1)
            .field("d2", &self.d2)
            .field("alpha1", &self.alpha1)
            .field("alpha2", &self.alpha2)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        d1: usize,
        d2: usize,
        alpha1: f64,
        alpha2: f64,
        b: TimeField,
        h: TimeField,
        f: StateField,
        c: StateField,
    ) -> Result<Self> {
        if d1 == 0 || d2 == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        check_alpha(alpha1)?;
        check_alpha(alpha2)?;
        Ok(Self {
            name: name.into(),
            d1,
            d2,
            alpha1,
            alpha2,
            b,
            h,
            f,
            c,
            grad_f_y: None,
            grad_h_y: None,
            grad_h_x: None,
            grad_b_y: None,
            holder: HolderMeta { v: alpha1, ..HolderMeta::default() },
            analytic: Analytic::default(),
            params: Vec::new(),
        })
    }

    /// Model with all four coefficients identically zero.
    pub fn zero(d1: usize, d2: usize, alpha1: f64, alpha2: f64) -> Result<Self> {
        let zt: TimeField = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
        let zs: StateField = Arc::new(|_, _, out: &mut [f64]| out.fill(0.0));
        let mut m = Self::new("zero", d1, d2, alpha1, alpha2, zt.clone(), zt.clone(), zs.clone(), zs)?;
        m.grad_f_y = Some(Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)));
        m.grad_h_y = Some(zt.clone());
        m.grad_h_x = Some(zt.clone());
        m.grad_b_y = Some(zt);
        Ok(m)
    }

    /// Stable text identifying the model and its parameters.
    pub fn fingerprint(&self) -> String {
        let mut s = format!("{}:d1={}:d2={}:a1={}:a2={}", self.name, self.d1, self.d2, self.alpha1, self.alpha2);
        for (k, v) in &self.params {
            s.push_str(&format!(":{k}={v}"));
        }
        s
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn has_flow_jacobians(&self) -> bool {
        self.grad_f_y.is_some()
    }
}

/// Time modulation `h(t) = h₀ (1 + ½ sin t)` shared by the benchmarks.
pub fn time_factor(h0: f64, t: f64) -> f64 {
    h0 * (1.0 + 0.5 * t.sin())
}

/// Parameters of the affine benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearParams {
    pub a: f64,
    pub kappa: f64,
    pub b1: f64,
    pub h0: f64,
    pub c0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self { a: 0.5, kappa: 1.0, b1: 0.4, h0: 1.0, c0: 0.3, alpha1: 1.5, alpha2: 1.5 }
    }
}

/// Scalar affine benchmark
///
/// `f = -κ(y - a x)`, `b = -x + b₁ y`, `H = h(t)(y - a x)`, `c = c₀`,
///
/// whose frozen law is `a x + Z` with `Z` the stationary stable
/// Ornstein–Uhlenbeck law, `E e^{iuZ} = exp(-|u|^{α₂}/(κ α₂))`.
pub fn make_linear_benchmark(p: LinearParams) -> Result<ModelSpec> {
    if !(p.kappa > 0.0) {
        return Err(Error::Parameter(format!("kappa must be positive, got {}", p.kappa)));
    }
    if p.b1 * p.a >= 1.0 || (p.b1 * p.a).abs() >= 1.0 {
        return Err(Error::Configuration(format!(
            "averaged drift -1 + b1*a = {} is not stable; need |b1*a| < 1",
            -1.0 + p.b1 * p.a
        )));
    }
    let LinearParams { a, kappa, b1, h0, c0, alpha1, alpha2 } = p;
    let b: TimeField = Arc::new(move |_, x, y, out| out[0] = -x[0] + b1 * y[0]);
    let h: TimeField = Arc::new(move |t, x, y, out| out[0] = time_factor(h0, t) * (y[0] - a * x[0]));
    let f: StateField = Arc::new(move |x, y, out| out[0] = -kappa * (y[0] - a * x[0]));
    let c: StateField = Arc::new(move |_, _, out| out[0] = c0);
    let mut m = ModelSpec::new("linear", 1, 1, alpha1, alpha2, b, h, f, c)?;
    m.grad_f_y = Some(Arc::new(move |_, _, out| out[0] = -kappa));
    m.grad_h_y = Some(Arc::new(move |t, _, _, out| out[0] = time_factor(h0, t)));
    m.grad_h_x = Some(Arc::new(move |t, _, _, out| out[0] = -a * time_factor(h0, t)));
    m.grad_b_y = Some(Arc::new(move |_, _, _, out| out[0] = b1));
    m.holder = HolderMeta { v: alpha1, ..HolderMeta::default() };
    let ou_scale = (kappa * alpha2).powf(-1.0 / alpha2);
    m.analytic = Analytic {
        bbar: Some(Arc::new(move |_, x, out| out[0] = (-1.0 + b1 * a) * x[0])),
        cbar: Some(Arc::new(move |t, _, out| out[0] = c0 * time_factor(h0, t) / kappa)),
        hbar: Some(Arc::new(|_, _, out| out[0] = 0.0)),
        u: Some(Arc::new(move |t, x, y, out| out[0] = time_factor(h0, t) * (y[0] - a * x[0]) / kappa)),
        grad_y_u: Some(Arc::new(move |t, _, _, out| out[0] = time_factor(h0, t) / kappa)),
        grad_x_u: Some(Arc::new(move |t, _, _, out| out[0] = -a * time_factor(h0, t) / kappa)),
        stationary: Some(Arc::new(move |x, rng, out| {
            out[0] = a * x[0] + ou_scale * standard_symmetric_stable(alpha2, rng)
        })),
    };
    m.params = vec![
        ("a".into(), a),
        ("kappa".into(), kappa),
        ("b1".into(), b1),
        ("h0".into(), h0),
        ("c0".into(), c0),
    ];
    Ok(m)
}

/// Parameters of the nonlinear benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SineParams {
    pub a: f64,
    pub kappa: f64,
    pub b1: f64,
    pub h0: f64,
    pub c0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Deliberate shift of the centering term, for negative controls.
    pub center_offset: f64,
}

impl Default for SineParams {
    fn default() -> Self {
        Self {
            a: 0.5,
            kappa: 1.0,
            b1: 0.4,
            h0: 1.0,
            c0: 0.3,
            alpha1: 1.5,
            alpha2: 1.5,
            center_offset: 0.0,
        }
    }
}

/// Cached centering constant of the sine benchmark.
///
/// The frozen law is `a tanh(x) + Z` for a fixed stationary `Z`, so
/// `S(x) = ∫ sin(y) μ^x(dy) = sin(a tanh x) · E cos Z`; only `E cos Z` has to
/// be estimated (see [`crate::ergodics::estimate_sine_center`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineCenter {
    pub cos_mean: f64,
    pub se: f64,
}

impl SineCenter {
    /// Closed-form `E cos Z = exp(-1/(κ α₂))`; used as a test oracle.
    pub fn exact(kappa: f64, alpha2: f64) -> Self {
        Self { cos_mean: (-1.0 / (kappa * alpha2)).exp(), se: 0.0 }
    }

    pub fn value(&self, a: f64, x: f64) -> f64 {
        self.cos_mean * (a * x.tanh()).sin()
    }
}

/// Nonlinear benchmark
///
/// `f = -κ(y - a tanh x)`, `b = -x + b₁ tanh y`, `H = h(t)(sin y - S(x))`,
/// `c = c₀`, centered by construction through `S`.
pub fn make_sine_benchmark(p: SineParams, center: SineCenter) -> Result<ModelSpec> {
    if !(p.kappa > 0.0) {
        return Err(Error::Parameter(format!("kappa must be positive, got {}", p.kappa)));
    }
    let SineParams { a, kappa, b1, h0, c0, alpha1, alpha2, center_offset } = p;
    let m_cos = center.cos_mean;
    let s_of = move |x: f64| m_cos * (a * x.tanh()).sin() + center_offset;
    let b: TimeField = Arc::new(move |_, x, y, out| out[0] = -x[0] + b1 * y[0].tanh());
    let h: TimeField = Arc::new(move |t, x, y, out| out[0] = time_factor(h0, t) * (y[0].sin() - s_of(x[0])));
    let f: StateField = Arc::new(move |x, y, out| out[0] = -kappa * (y[0] - a * x[0].tanh()));
    let c: StateField = Arc::new(move |_, _, out| out[0] = c0);
    let mut m = ModelSpec::new("sine", 1, 1, alpha1, alpha2, b, h, f, c)?;
    m.grad_f_y = Some(Arc::new(move |_, _, out| out[0] = -kappa));
    m.grad_h_y = Some(Arc::new(move |t, _, y, out| out[0] = time_factor(h0, t) * y[0].cos()));
    m.grad_h_x = Some(Arc::new(move |t, x, _, out| {
        let th = x[0].tanh();
        out[0] = -time_factor(h0, t) * m_cos * a * (1.0 - th * th) * (a * th).cos()
    }));
    m.grad_b_y = Some(Arc::new(move |_, _, y, out| {
        let th = y[0].tanh();
        out[0] = b1 * (1.0 - th * th)
    }));
    let ou_scale = (kappa * alpha2).powf(-1.0 / alpha2);
    m.analytic = Analytic {
        stationary: Some(Arc::new(move |x, rng, out| {
            out[0] = a * x[0].tanh() + ou_scale * standard_symmetric_stable(alpha2, rng)
        })),
        ..Analytic::default()
    };
    m.params = vec![
        ("a".into(), a),
        ("kappa".into(), kappa),
        ("b1".into(), b1),
        ("h0".into(), h0),
        ("c0".into(), c0),
        ("center".into(), m_cos),
        ("center_offset".into(), center_offset),
    ];
    Ok(m)
}

// ---------------------------------------------------------------------------
// structural conditions

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Pass,
    Warn,
    Fail,
}

/// A pair of probe points `(t, x, y)` that realizes a reported constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    /// Worst-case constant over the probes (meaning depends on the check).
    pub estimate: f64,
    pub probes: usize,
    pub flag: Flag,
    pub witness: ProbePair,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub model: String,
    pub radius: f64,
    pub n_pairs: usize,
    pub checks: Vec<ConditionCheck>,
    pub overall: Flag,
}

impl ConditionReport {
    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub n_pairs: usize,
    pub radius: f64,
    /// Probe times are drawn from `[0, t_max]`.
    pub t_max: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { n_pairs: 10_000, radius: 5.0, t_max: 1.0 }
    }
}

#[derive(Clone)]
struct Point {
    t: f64,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Point {
    fn flat(&self) -> Vec<f64> {
        let mut v = vec![self.t];
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.y);
        v
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Zone {
    Any,
    Core,
    Shell,
}

struct Prober<'a> {
    model: &'a ModelSpec,
    radius: f64,
    t_max: f64,
    rng: StreamRng,
}

impl Prober<'_> {
    fn coord(&mut self, zone: Zone) -> f64 {
        let r = self.radius;
        match zone {
            Zone::Any => r * (2.0 * self.rng.random::<f64>() - 1.0),
            Zone::Core => 0.5 * r * (2.0 * self.rng.random::<f64>() - 1.0),
            Zone::Shell => {
                let mag = r * (0.8 + 0.2 * self.rng.random::<f64>());
                if self.rng.random::<bool>() { mag } else { -mag }
            }
        }
    }

    fn vector(&mut self, dim: usize, zone: Zone) -> Vec<f64> {
        (0..dim).map(|_| self.coord(zone)).collect()
    }

    fn point(&mut self, zone: Zone) -> Point {
        let t = self.t_max * self.rng.random::<f64>();
        let x = self.vector(self.model.d1, zone);
        let y = self.vector(self.model.d2, zone);
        Point { t, x, y }
    }

    /// Second point of a pair: shell pairs stay in the shell on the same side.
    fn partner(&mut self, p: &Point, zone: Zone, vary: Vary) -> Point {
        let mut q = p.clone();
        let r = self.radius;
        let jitter = |v: &mut Vec<f64>, rng: &mut StreamRng| {
            for c in v.iter_mut() {
                match zone {
                    Zone::Shell => {
                        let sign = c.signum();
                        let mag = (c.abs() + 0.1 * r * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.8 * r, r);
                        *c = sign * mag;
                    }
                    Zone::Core => *c = 0.5 * r * (2.0 * rng.random::<f64>() - 1.0),
                    Zone::Any => *c = r * (2.0 * rng.random::<f64>() - 1.0),
                }
            }
        };
        match vary {
            Vary::X => jitter(&mut q.x, &mut self.rng),
            Vary::Y => jitter(&mut q.y, &mut self.rng),
            Vary::All => {
                jitter(&mut q.x, &mut self.rng);
                jitter(&mut q.y, &mut self.rng);
                q.t = self.t_max * self.rng.random::<f64>();
            }
        }
        q
    }
}

#[derive(Clone, Copy)]
enum Vary {
    X,
    Y,
    All,
}

#[derive(Clone, Copy)]
enum Coef {
    B,
    H,
    F,
    C,
}

impl Coef {
    fn dim(self, m: &ModelSpec) -> usize {
        match self {
            Coef::B | Coef::H => m.d1,
            Coef::F | Coef::C => m.d2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Coef::B => "b",
            Coef::H => "H",
            Coef::F => "f",
            Coef::C => "c",
        }
    }

    fn eval(self, m: &ModelSpec, p: &Point, out: &mut [f64]) -> Result<()> {
        match self {
            Coef::B => (m.b)(p.t, &p.x, &p.y, out),
            Coef::H => (m.h)(p.t, &p.x, &p.y, out),
            Coef::F => (m.f)(&p.x, &p.y, out),
            Coef::C => (m.c)(&p.x, &p.y, out),
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!(
                "coefficient {} is not finite at probe {:?}",
                self.label(),
                p.flat()
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

struct Sample {
    value: f64,
    first: Point,
    second: Point,
}

fn sample_pairs(
    pr: &mut Prober<'_>,
    coef: Coef,
    vary: Vary,
    zone: Zone,
    n: usize,
    mut measure: impl FnMut(&Point, &Point, &[f64], &[f64]) -> Option<f64>,
) -> Result<Vec<Sample>> {
    let dim = coef.dim(pr.model);
    let (mut o1, mut o2) = (vec![0.0; dim], vec![0.0; dim]);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = pr.point(zone);
        let q = pr.partner(&p, zone, vary);
        coef.eval(pr.model, &p, &mut o1)?;
        coef.eval(pr.model, &q, &mut o2)?;
        if let Some(v) = measure(&p, &q, &o1, &o2) {
            out.push(Sample { value: v, first: p, second: q });
        }
    }
    Ok(out)
}

fn worst<'a>(samples: &'a [Sample], max: bool) -> Option<&'a Sample> {
    samples.iter().max_by(|a, b| {
        if max {
            a.value.total_cmp(&b.value)
        } else {
            b.value.total_cmp(&a.value)
        }
    })
}

fn witness(s: &Sample) -> ProbePair {
    ProbePair { first: s.first.flat(), second: s.second.flat() }
}

/// Dissipativity constant `-⟨Δcoef, Δz⟩/|Δz|²` over pairs varying one block.
fn dissipativity(pr: &mut Prober<'_>, coef: Coef, vary: Vary, n: usize, hard: bool) -> Result<ConditionCheck> {
    let ratio = |p: &Point, q: &Point, a: &[f64], b: &[f64]| {
        let dz = match vary {
            Vary::X => diff(&p.x, &q.x),
            _ => diff(&p.y, &q.y),
        };
        let n2 = dot(&dz, &dz);
        (n2 > 1e-18).then(|| -dot(&diff(a, b), &dz) / n2)
    };
    let any = sample_pairs(pr, coef, vary, Zone::Any, n, ratio)?;
    let core = sample_pairs(pr, coef, vary, Zone::Core, n.div_ceil(4), ratio)?;
    let shell = sample_pairs(pr, coef, vary, Zone::Shell, n.div_ceil(4), ratio)?;
    let probes = any.len() + core.len() + shell.len();
    let all: Vec<&Sample> = any.iter().chain(&core).chain(&shell).collect();
    let worst_all = all
        .iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or_else(|| Error::Argument("no usable probe pairs".into()))?;
    let estimate = worst_all.value;
    let scale = all.iter().map(|s| s.value.abs()).fold(0.0, f64::max).max(1.0);
    let core_vals: Vec<f64> = core.iter().map(|s| s.value).collect();
    let core_median = if core_vals.is_empty() { estimate } else { stats::median(&mut core_vals.clone()) };
    let shell_min = worst(&shell, false).map(|s| s.value).unwrap_or(estimate);
    let block = match vary {
        Vary::X => "x",
        _ => "y",
    };
    let (flag, note) = if estimate < -1e-12 * scale {
        let f = if hard { Flag::Fail } else { Flag::Warn };
        (f, format!("inner product <Δ{}, Δ{block}> is positive on some pair", coef.label()))
    } else if estimate <= 1e-12 * scale {
        (Flag::Warn, format!("{} is not strictly dissipative in {block}", coef.label()))
    } else if core_median > 0.0 && shell_min < 0.25 * core_median {
        (
            Flag::Warn,
            format!(
                "weak dissipativity: constant {shell_min:.4} near the box boundary vs {core_median:.4} in the core"
            ),
        )
    } else {
        (Flag::Pass, String::new())
    };
    Ok(ConditionCheck {
        name: format!("dissipativity_{}", coef.label()),
        estimate,
        probes,
        flag,
        witness: ProbePair { first: worst_all.first.flat(), second: worst_all.second.flat() },
        note,
    })
}

fn lipschitz(pr: &mut Prober<'_>, coef: Coef, n: usize, holder: HolderMeta) -> Result<ConditionCheck> {
    let slow = matches!(coef, Coef::B | Coef::H);
    let ratio = |p: &Point, q: &Point, a: &[f64], b: &[f64]| {
        let mut den = norm(&diff(&p.x, &q.x)).powf(holder.theta2) + norm(&diff(&p.y, &q.y));
        if slow {
            den += (p.t - q.t).abs().powf(holder.theta1);
        }
        (den > 1e-12).then(|| norm(&diff(a, b)) / den)
    };
    let core = sample_pairs(pr, coef, Vary::All, Zone::Core, n.div_ceil(2), ratio)?;
    let any = sample_pairs(pr, coef, Vary::All, Zone::Any, n, ratio)?;
    let w_core = worst(&core, true).map(|s| s.value).unwrap_or(0.0);
    let w_any = worst(&any, true).ok_or_else(|| Error::Argument("no usable probe pairs".into()))?;
    let (flag, note) = if w_any.value > 4.0 * w_core.max(1e-12) {
        (Flag::Warn, "Lipschitz ratio grows toward the box boundary".to_string())
    } else {
        (Flag::Pass, String::new())
    };
    let name = if slow { "lipschitz_ct" } else { "lipschitz_c6" };
    Ok(ConditionCheck {
        name: format!("{name}_{}", coef.label()),
        estimate: w_any.value,
        probes: core.len() + any.len(),
        flag,
        witness: witness(w_any),
        note,
    })
}

/// Growth envelopes: `sup|b|/(1+K)`, `sup|H|/(1+K)` with `K ≡ 1`,
/// `sup|f|/(|x|+|y|)`, `sup|c|`.
fn growth(pr: &mut Prober<'_>, coef: Coef, n: usize, warn_only: bool) -> Result<ConditionCheck> {
    let measure = |p: &Point, _: &Point, a: &[f64], _: &[f64]| match coef {
        Coef::B | Coef::H => Some(norm(a) / 2.0),
        Coef::F => {
            let den = norm(&p.x) + norm(&p.y);
            (den > 1e-9).then(|| norm(a) / den)
        }
        Coef::C => Some(norm(a)),
    };
    let core = sample_pairs(pr, coef, Vary::X, Zone::Core, n.div_ceil(2), measure)?;
    let any = sample_pairs(pr, coef, Vary::X, Zone::Any, n, measure)?;
    let shell = sample_pairs(pr, coef, Vary::X, Zone::Shell, n.div_ceil(4), measure)?;
    let half = worst(&core, true).map(|s| s.value).unwrap_or(0.0);
    let all: Vec<Sample> = any.into_iter().chain(shell).collect();
    let w = worst(&all, true).ok_or_else(|| Error::Argument("no usable probe pairs".into()))?;
    let growing = w.value > 1.5 * half.max(1e-12);
    let (flag, note) = match coef {
        Coef::F => (Flag::Pass, String::new()),
        _ if growing => (
            if warn_only { Flag::Warn } else { Flag::Fail },
            format!(
                "envelope grows with the box ({half:.4} on the half box, {:.4} on the full box); bound holds on compacts only",
                w.value
            ),
        ),
        _ => (Flag::Pass, String::new()),
    };
    let name = match coef {
        Coef::B | Coef::H => "growth_c4",
        Coef::F => "growth_c5",
        Coef::C => "bounded_c5",
    };
    Ok(ConditionCheck {
        name: format!("{name}_{}", coef.label()),
        estimate: w.value,
        probes: core.len() + all.len(),
        flag,
        witness: witness(w),
        note,
    })
}

/// Probe the dissipativity, Lipschitz and growth conditions on random pairs
/// in the box `[-radius, radius]^{d1+d2}`.
///
/// Only the strict dissipativity of `f`, `b` and `H` can fail; conditions on
/// `c` and the boundedness of `b`, `H` are reported as warnings since they
/// cannot all hold globally at once.
pub fn validate_structural_conditions(model: &ModelSpec, probe: ProbeSpec, stream: RngStream) -> Result<ConditionReport> {
    if probe.n_pairs == 0 {
        return Err(Error::Argument("n_pairs must be at least 1".into()));
    }
    if !(probe.radius > 0.0) {
        return Err(Error::Argument("probe radius must be positive".into()));
    }
    let mut pr = Prober { model, radius: probe.radius, t_max: probe.t_max, rng: stream.rng() };
    let n = probe.n_pairs;
    let checks = vec![
        dissipativity(&mut pr, Coef::F, Vary::Y, n, true)?,
        dissipativity(&mut pr, Coef::C, Vary::Y, n, false)?,
        dissipativity(&mut pr, Coef::B, Vary::X, n, true)?,
        dissipativity(&mut pr, Coef::H, Vary::X, n, true)?,
        lipschitz(&mut pr, Coef::B, n, model.holder)?,
        lipschitz(&mut pr, Coef::H, n, model.holder)?,
        lipschitz(&mut pr, Coef::F, n, model.holder)?,
        lipschitz(&mut pr, Coef::C, n, model.holder)?,
        growth(&mut pr, Coef::B, n, true)?,
        growth(&mut pr, Coef::H, n, true)?,
        growth(&mut pr, Coef::F, n, true)?,
        growth(&mut pr, Coef::C, n, true)?,
    ];
    let overall = checks.iter().map(|c| c.flag).max().unwrap_or(Flag::Pass);
    Ok(ConditionReport {
        model: model.fingerprint(),
        radius: probe.radius,
        n_pairs: n,
        checks,
        overall,
    })
}

/// Ensemble average of `H(t, x, ·)` with batch-means standard errors.
pub fn check_centering(model: &ModelSpec, t: f64, x: &[f64], ensemble: &FrozenEnsemble) -> Result<(Vec<f64>, Vec<f64>)> {
    ensemble.require_anchor(x)?;
    let d1 = model.d1;
    let n = ensemble.len();
    let mut cols = vec![Vec::with_capacity(n); d1];
    let mut out = vec![0.0; d1];
    for y in ensemble.iter() {
        (model.h)(t, x, y, &mut out);
        for (col, v) in cols.iter_mut().zip(&out) {
            col.push(*v);
        }
    }
    let est = cols.iter().map(|c| stats::mean(c)).collect();
    let se = cols.iter().map(|c| stats::batch_means_se(c, 30)).collect();
    Ok((est, se))
}

// ---------------------------------------------------------------------------
// scale schedules

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    R1,
    R2,
    R3,
    R4,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::R1 => "R1",
            Regime::R2 => "R2",
            Regime::R3 => "R3",
            Regime::R4 => "R4",
        };
        f.write_str(s)
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R1" | "1" => Ok(Regime::R1),
            "R2" | "2" => Ok(Regime::R2),
            "R3" | "3" => Ok(Regime::R3),
            "R4" | "4" => Ok(Regime::R4),
            other => Err(Error::Parameter(format!("unknown regime {other:?}; expected R1..R4"))),
        }
    }
}

/// Power-law scales `γ = ε^g`, `η = ε^e`, `β = ε^bexp` tagged with a regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub regime: Regime,
    pub e: f64,
    pub g: f64,
    pub bexp: f64,
}

impl ScaleSchedule {
    pub fn gamma(&self, eps: f64) -> f64 {
        eps.powf(self.g)
    }

    pub fn eta(&self, eps: f64) -> f64 {
        eps.powf(self.e)
    }

    pub fn beta(&self, eps: f64) -> f64 {
        eps.powf(self.bexp)
    }

    /// The default exponent triple used when a config names only a regime.
    pub fn default_exponents(regime: Regime) -> (f64, f64, f64) {
        match regime {
            Regime::R1 => (1.0, 0.125, 0.5),
            Regime::R2 => (0.625, 0.125, 0.5),
            Regime::R3 => (1.0, 0.5, 0.25),
            Regime::R4 => (1.0, 0.5, 0.5),
        }
    }
}

const REL_TOL: f64 = 1e-9;

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * (1.0 + a.abs().max(b.abs()))
}

/// Exponent of `η^{1-(1-(1∧v))/α₂}` relative to `ε`, the first limit of the
/// strong/weak regime definitions.
pub fn regime_eta_exponent(e: f64, alpha2: f64, v: f64) -> f64 {
    e * (1.0 - (1.0 - v.min(1.0)) / alpha2)
}

fn violation(relation: &str, detail: String) -> Error {
    Error::Schedule { relation: relation.to_string(), detail }
}

/// Validate an exponent triple against the regime's defining relations.
pub fn make_schedule(regime: Regime, e: f64, g: f64, bexp: f64, alpha2: f64, v: f64) -> Result<ScaleSchedule> {
    for (name, val) in [("e", e), ("g", g), ("bexp", bexp)] {
        if !(val >= 0.0 && val.is_finite()) {
            return Err(violation("exponents nonnegative", format!("{name} = {val}")));
        }
    }
    if !(e > bexp) {
        return Err(violation(
            "eta/beta < 1 (e > bexp)",
            format!("e = {e} must exceed bexp = {bexp}"),
        ));
    }
    let lead = regime_eta_exponent(e, alpha2, v);
    let check_lead = || {
        if lead > 2.0 * g {
            Ok(())
        } else {
            Err(violation(
                "eta^(1-(1-(1^v))/alpha2) / gamma^2 -> 0",
                format!("e*(1-(1-min(1,v))/alpha2) = {lead} must exceed 2g = {}", 2.0 * g),
            ))
        }
    };
    match regime {
        Regime::R1 => {
            check_lead()?;
            if !(e > g + bexp) {
                return Err(violation(
                    "eta/(gamma*beta) -> 0 (e > g + bexp)",
                    format!("e = {e}, g + bexp = {}", g + bexp),
                ));
            }
        }
        Regime::R2 => {
            check_lead()?;
            if !approx_eq(e, g + bexp) {
                return Err(violation(
                    "eta = gamma*beta (e = g + bexp)",
                    format!("e = {e}, g + bexp = {}", g + bexp),
                ));
            }
        }
        Regime::R3 => {
            if !(g > bexp) {
                return Err(violation("gamma/beta -> 0 (g > bexp)", format!("g = {g}, bexp = {bexp}")));
            }
            if !approx_eq(e, 2.0 * g) {
                return Err(violation("eta = gamma^2 (e = 2g)", format!("e = {e}, 2g = {}", 2.0 * g)));
            }
        }
        Regime::R4 => {
            if !approx_eq(e, 2.0 * g) {
                return Err(violation("eta = gamma^2 (e = 2g)", format!("e = {e}, 2g = {}", 2.0 * g)));
            }
            if !approx_eq(bexp, g) {
                return Err(violation("bexp = g (eta = gamma*beta)", format!("bexp = {bexp}, g = {g}")));
            }
        }
    }
    Ok(ScaleSchedule { regime, e, g, bexp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probe() -> ProbeSpec {
        ProbeSpec { n_pairs: 2000, ..ProbeSpec::default() }
    }

    #[test]
    fn linear_benchmark_closed_forms() {
        let m = make_linear_benchmark(LinearParams::default()).unwrap();
        let mut out = [0.0];
        (m.analytic.u.as_ref().unwrap())(0.0, &[2.0], &[3.0], &mut out);
        assert_eq!(out[0], 2.0);
        (m.analytic.bbar.as_ref().unwrap())(0.3, &[2.0], &mut out);
        assert!((out[0] + 1.6).abs() < 1e-15);
        (m.analytic.hbar.as_ref().unwrap())(1.0, &[7.0], &mut out);
        assert_eq!(out[0], 0.0);
        (m.analytic.cbar.as_ref().unwrap())(0.0, &[1.0], &mut out);
        assert!((out[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn linear_benchmark_rejects_unstable_drift() {
        let p = LinearParams { a: 2.0, b1: 0.6, ..LinearParams::default() };
        assert!(matches!(make_linear_benchmark(p), Err(Error::Configuration(_))));
        let p = LinearParams { kappa: 0.0, ..LinearParams::default() };
        assert!(make_linear_benchmark(p).is_err());
    }

    #[test]
    fn sine_center_vanishes_at_origin() {
        let c = SineCenter::exact(1.0, 1.5);
        assert_eq!(c.value(0.5, 0.0), 0.0);
        let m = make_sine_benchmark(SineParams { a: 0.0, ..SineParams::default() }, c).unwrap();
        let mut out = [0.0];
        (m.h)(0.0, &[1.3], &[0.0], &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn linear_dissipativity_constants_are_exact() {
        let p = LinearParams { kappa: 1.7, ..LinearParams::default() };
        let m = make_linear_benchmark(p).unwrap();
        let r = validate_structural_conditions(&m, probe(), RngStream::new(1, 0)).unwrap();
        let f = r.check("dissipativity_f").unwrap();
        assert!((f.estimate - 1.7).abs() < 1e-9, "{f:?}");
        assert_eq!(f.flag, Flag::Pass);
        let b = r.check("dissipativity_b").unwrap();
        assert!((b.estimate - 1.0).abs() < 1e-9);
        // constant c is not strictly dissipative: warning only
        assert_eq!(r.check("dissipativity_c").unwrap().flag, Flag::Warn);
        assert_ne!(r.overall, Flag::Fail);
        assert!(r.checks.iter().all(|c| c.probes > 0 && !c.witness.first.is_empty()));
    }

    #[test]
    fn anti_dissipative_f_fails() {
        let mut m = make_linear_benchmark(LinearParams::default()).unwrap();
        m.f = Arc::new(|_, y, out| out[0] = y[0]);
        let r = validate_structural_conditions(&m, probe(), RngStream::new(2, 0)).unwrap();
        assert_eq!(r.check("dissipativity_f").unwrap().flag, Flag::Fail);
        assert_eq!(r.overall, Flag::Fail);
    }

    #[test]
    fn arctan_c_is_weakly_dissipative() {
        let mut m = make_linear_benchmark(LinearParams::default()).unwrap();
        m.c = Arc::new(|_, y, out| out[0] = -y[0].atan());
        let r = validate_structural_conditions(&m, probe(), RngStream::new(3, 0)).unwrap();
        let c = r.check("dissipativity_c").unwrap();
        assert_eq!(c.flag, Flag::Warn, "{c:?}");
        assert!(c.note.contains("weak"));
        // the worst ratio sits near the boundary: (atan y1 - atan y2)/(y1 - y2) ≈ 1/(1+25)
        assert!(c.estimate < 0.06 && c.estimate > 0.0);
    }

    #[test]
    fn non_finite_coefficient_is_a_model_error() {
        let mut m = make_linear_benchmark(LinearParams::default()).unwrap();
        m.b = Arc::new(|_, x, _, out| out[0] = 1.0 / (x[0] - x[0]));
        assert!(matches!(
            validate_structural_conditions(&m, probe(), RngStream::new(4, 0)),
            Err(Error::Model(_))
        ));
        assert!(validate_structural_conditions(&m, ProbeSpec { n_pairs: 0, ..probe() }, RngStream::new(4, 0)).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert!(make_schedule(Regime::R2, 0.625, 0.125, 0.5, 1.5, 1.5).is_ok());
        match make_schedule(Regime::R4, 1.0, 0.5, 0.25, 1.5, 1.5) {
            Err(Error::Schedule { relation, .. }) => assert!(relation.contains("bexp = g")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(make_schedule(Regime::R1, 1.0, 0.125, 0.5, 1.5, 1.5).is_ok());
        assert!(make_schedule(Regime::R3, 1.0, 0.5, 0.25, 1.5, 1.5).is_ok());
        assert!(make_schedule(Regime::R4, 1.0, 0.5, 0.5, 1.5, 1.5).is_ok());
        // eta/beta >= 1
        match make_schedule(Regime::R1, 0.5, 0.1, 0.5, 1.5, 1.5) {
            Err(Error::Schedule { relation, .. }) => assert!(relation.contains("eta/beta")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn reference_accepts(regime: Regime, e: f64, g: f64, b: f64, alpha2: f64, v: f64) -> bool {
        let lead = e * (1.0 - (1.0 - v.min(1.0)) / alpha2) > 2.0 * g;
        let eq = |p: f64, q: f64| (p - q).abs() <= 1e-9 * (1.0 + p.abs().max(q.abs()));
        e > b
            && match regime {
                Regime::R1 => lead && e > g + b,
                Regime::R2 => lead && eq(e, g + b),
                Regime::R3 => g > b && eq(e, 2.0 * g),
                Regime::R4 => eq(e, 2.0 * g) && eq(b, g),
            }
    }

    proptest! {
        #[test]
        fn schedule_acceptance_matches_relations(
            r in 0usize..4,
            e in 0.0f64..2.0, g in 0.0f64..1.0, b in 0.0f64..1.0,
            alpha2 in 1.01f64..2.0, v in 0.1f64..2.0,
            snap in 0usize..3,
        ) {
            let regime = [Regime::R1, Regime::R2, Regime::R3, Regime::R4][r];
            // snap onto the equality manifolds so they get exercised
            let (e, b) = match (regime, snap) {
                (Regime::R2, 0) => (g + b, b),
                (Regime::R3, 0) | (Regime::R4, 0) => (2.0 * g, b),
                (Regime::R4, 1) => (2.0 * g, g),
                _ => (e, b),
            };
            let got = make_schedule(regime, e, g, b, alpha2, v).is_ok();
            prop_assert_eq!(got, reference_accepts(regime, e, g, b, alpha2, v));
        }
    }
}
