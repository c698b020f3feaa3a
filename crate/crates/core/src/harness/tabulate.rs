//! Averaged drifts tabulated on a `(t, x)` grid from frozen ensembles and
//! corrector averages, served to the slow integrator by bilinear
//! interpolation. Scalar `x` only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{averaged_corrector, CorrectorContext, CorrectorParams, GradMode};
use crate::ergodics::{contraction_diagnostic, default_burn_in, estimate_bbar, sample_invariant, FrozenEnsemble};
use crate::error::{Error, Result};
use crate::integrator::{DriftField, DriftKind};
use crate::model::{check_centering, ModelSpec};
use crate::noise::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabulationSpec {
    pub t_nodes: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub x_nodes: usize,
    /// Ensemble size per `x` node.
    pub ensemble_n: usize,
    pub thin: usize,
    pub h: f64,
    /// Ensemble states per corrector average.
    pub samples: usize,
    pub mode: GradMode,
    pub corrector: CorrectorParams,
}

impl Default for TabulationSpec {
    fn default() -> Self {
        Self {
            t_nodes: 5,
            x_min: -3.0,
            x_max: 3.0,
            x_nodes: 13,
            ensemble_n: 20_000,
            thin: 10,
            h: 0.01,
            samples: 40,
            mode: GradMode::Flow,
            corrector: CorrectorParams { reps: 20, ..CorrectorParams::default() },
        }
    }
}

impl TabulationSpec {
    pub fn x_grid(&self) -> Vec<f64> {
        grid(self.x_min, self.x_max, self.x_nodes)
    }

    pub fn t_grid(&self, t_end: f64) -> Vec<f64> {
        grid(0.0, t_end, self.t_nodes)
    }

    fn check(&self) -> Result<()> {
        if self.t_nodes < 2 || self.x_nodes < 2 || !(self.x_max > self.x_min) {
            return Err(Error::Configuration("tabulation needs >= 2 nodes per axis and x_max > x_min".into()));
        }
        if self.ensemble_n == 0 || self.thin == 0 || self.samples == 0 || !(self.h > 0.0) {
            return Err(Error::Configuration("tabulation sizes and step must be positive".into()));
        }
        Ok(())
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// How a table continues outside its `x` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolation {
    Constant,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    pub kind: DriftKind,
    pub model_fingerprint: String,
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    /// Row-major `t × x`.
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub extrapolation: Extrapolation,
    pub provenance: String,
}

impl DriftTable {
    fn locate(nodes: &[f64], v: f64) -> (usize, f64) {
        let n = nodes.len();
        let i = nodes.partition_point(|&a| a <= v).clamp(1, n - 1) - 1;
        (i, (v - nodes[i]) / (nodes[i + 1] - nodes[i]))
    }

    fn bilinear(&self, data: &[f64], t: f64, x: f64) -> f64 {
        let nx = self.x_nodes.len();
        let (it, wt) = Self::locate(&self.t_nodes, t);
        let wt = wt.clamp(0.0, 1.0);
        let (ix, mut wx) = Self::locate(&self.x_nodes, x);
        if self.extrapolation == Extrapolation::Constant {
            wx = wx.clamp(0.0, 1.0);
        }
        let at = |i: usize, j: usize| data[i * nx + j];
        let row = |i: usize| at(i, ix) * (1.0 - wx) + at(i, ix + 1) * wx;
        row(it) * (1.0 - wt) + row(it + 1) * wt
    }
}

impl DriftField for DriftTable {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.bilinear(&self.values, t, x[0]);
    }

    fn se(&self, t: f64, x: &[f64]) -> f64 {
        let mut s = self.se.clone();
        s.iter_mut().for_each(|v| *v = v.abs());
        let x = x[0].clamp(self.x_nodes[0], self.x_nodes[self.x_nodes.len() - 1]);
        self.bilinear(&s, t, x)
    }

    fn provenance(&self) -> String {
        self.provenance.clone()
    }
}

/// One frozen ensemble per `x` node, started at `y = 0`.
pub fn tabulate_ensembles(model: &ModelSpec, spec: &TabulationSpec, rate: f64, stream: RngStream) -> Result<Vec<FrozenEnsemble>> {
    spec.check()?;
    let burn = default_burn_in(rate, 1e-3) + 10.0 * spec.h;
    spec.x_grid()
        .par_iter()
        .enumerate()
        .map(|(i, &x)| sample_invariant(model, &[x], burn, spec.ensemble_n, spec.thin, spec.h, stream.substream(i as u64)))
        .collect()
}

/// Contraction rate `β̂/2` fitted at the middle of the `x` grid.
pub fn estimate_contraction_rate(model: &ModelSpec, spec: &TabulationSpec, stream: RngStream) -> Result<f64> {
    let xs = spec.x_grid();
    let x = vec![xs[xs.len() / 2]; model.d1];
    let mut y1 = vec![0.0; model.d2];
    let mut y2 = vec![0.0; model.d2];
    y1[0] = -5.0;
    y2[0] = 5.0;
    let d = contraction_diagnostic(model, &x, &y1, &y2, 10.0, spec.h, stream)?;
    if !(d.rate > 0.0) {
        return Err(Error::Model(format!("frozen equation does not contract (fitted rate {})", d.rate)));
    }
    Ok(d.rate)
}

/// Tabulate one averaged drift over `[0, t_end] × [x_min, x_max]`.
#[allow(clippy::too_many_arguments)]
pub fn tabulate_drift(
    model: &ModelSpec,
    kind: DriftKind,
    t_end: f64,
    spec: &TabulationSpec,
    rate: f64,
    ensembles: &[FrozenEnsemble],
    stream: RngStream,
) -> Result<DriftTable> {
    spec.check()?;
    if model.d1 != 1 {
        return Err(Error::Argument("drift tables support scalar x only".into()));
    }
    let xs = spec.x_grid();
    let ts = spec.t_grid(t_end);
    if ensembles.len() != xs.len() {
        return Err(Error::Argument(format!("{} ensembles for {} x nodes", ensembles.len(), xs.len())));
    }
    let cells: Vec<(usize, usize)> = (0..ts.len()).flat_map(|i| (0..xs.len()).map(move |j| (i, j))).collect();
    let vals: Vec<(f64, f64)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let (t, x) = (ts[i], [xs[j]]);
            let ens = &ensembles[j];
            match kind {
                DriftKind::Bbar => {
                    let (v, s) = estimate_bbar(model, t, &x, ens)?;
                    Ok((v[0], s[0]))
                }
                _ => {
                    let (est, se) = check_centering(model, t, &x, ens)?;
                    let ctx = CorrectorContext::new(rate).with_centering(est, se);
                    let cell = stream.substream((i * xs.len() + j) as u64);
                    let a = averaged_corrector(model, kind, t, &x, ens, spec.samples, spec.mode, &ctx, &spec.corrector, cell)?;
                    Ok((a.value[0], (a.se[0].powi(2) + a.truncation_bound.powi(2)).sqrt()))
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(DriftTable {
        kind,
        model_fingerprint: model.fingerprint(),
        t_nodes: ts,
        x_nodes: xs,
        values: vals.iter().map(|v| v.0).collect(),
        se: vals.iter().map(|v| v.1).collect(),
        extrapolation: if kind == DriftKind::Bbar { Extrapolation::Linear } else { Extrapolation::Constant },
        provenance: format!(
            "tabulated {}x{} grid, {} ensemble states per node{}",
            spec.t_nodes,
            spec.x_nodes,
            spec.ensemble_n,
            if kind == DriftKind::Bbar { String::new() } else { format!(", {} corrector samples", spec.samples) }
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_benchmark, LinearParams};

    #[test]
    fn bilinear_is_exact_on_bilinear_data() {
        let t_nodes = vec![0.0, 0.5, 1.0];
        let x_nodes = vec![-1.0, 0.0, 2.0];
        let f = |t: f64, x: f64| 1.0 + 2.0 * t - x + 0.5 * t * x;
        let values: Vec<f64> = t_nodes.iter().flat_map(|&t| x_nodes.iter().map(move |&x| f(t, x))).collect();
        let mut tab = DriftTable {
            kind: DriftKind::Bbar,
            model_fingerprint: String::new(),
            t_nodes,
            x_nodes,
            se: vec![0.0; values.len()],
            values,
            extrapolation: Extrapolation::Linear,
            provenance: String::new(),
        };
        let mut out = [0.0];
        for &(t, x) in &[(0.1, 0.3), (0.75, -0.6), (0.9, 3.0)] {
            tab.eval(t, &[x], &mut out);
            assert!((out[0] - f(t, x)).abs() < 1e-12, "{t} {x}");
        }
        tab.extrapolation = Extrapolation::Constant;
        tab.eval(0.0, &[5.0], &mut out);
        assert!((out[0] - f(0.0, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn linear_bbar_and_cbar_tables() {
        let m = make_linear_benchmark(LinearParams::default()).unwrap();
        let spec = TabulationSpec {
            t_nodes: 2,
            x_nodes: 3,
            ensemble_n: 4000,
            samples: 10,
            corrector: CorrectorParams { reps: 5, ..CorrectorParams::default() },
            ..TabulationSpec::default()
        };
        let rate = estimate_contraction_rate(&m, &spec, RngStream::new(1, 0)).unwrap();
        assert!((rate - 1.0).abs() < 0.02);
        let ens = tabulate_ensembles(&m, &spec, rate, RngStream::new(1, 1)).unwrap();
        let b = tabulate_drift(&m, DriftKind::Bbar, 1.0, &spec, rate, &ens, RngStream::new(1, 2)).unwrap();
        let mut out = [0.0];
        for (k, &x) in b.x_nodes.iter().enumerate() {
            b.eval(0.0, &[x], &mut out);
            assert!((out[0] + 0.8 * x).abs() <= 4.0 * b.se[k] + 1e-9, "{x}: {}", out[0]);
        }
        let c = tabulate_drift(&m, DriftKind::Cbar, 1.0, &spec, rate, &ens, RngStream::new(1, 3)).unwrap();
        for (i, &t) in c.t_nodes.iter().enumerate() {
            let exact = 0.3 * crate::model::time_factor(1.0, t);
            for k in 0..c.x_nodes.len() {
                assert!((c.values[i * 3 + k] - exact).abs() <= 3.0 * c.se[i * 3 + k] + 1e-9);
            }
        }
    }
}
