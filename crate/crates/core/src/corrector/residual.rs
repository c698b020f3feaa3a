//! Tabulated correctors on a `y` grid and the residual of the Poisson
//! equation they are meant to solve (scalar `x`, `y`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quadrature::{fractional_laplacian_1d_detailed, QuadParams, TailModel};
use super::spline::{local_fourth_derivative, CubicSpline};
use super::{horizon, run_grid_pairs, CorrectorContext, CorrectorParams, Rhs};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::noise::{levy_measure_constant, RngStream};
use crate::stats;

/// Spacing 0.1 on `[-8, 8]`, then geometric (ratio 1.2) out to `±60`.
pub fn default_residual_nodes() -> Vec<f64> {
    let mut pos = Vec::new();
    let mut v: f64 = 8.0;
    while v < 60.0 {
        v = (v * 1.2).min(60.0);
        pos.push(v);
    }
    let mut nodes: Vec<f64> = pos.iter().rev().map(|v| -v).collect();
    nodes.extend((0..=160).map(|i| -8.0 + 0.1 * i as f64));
    nodes.extend(pos);
    nodes
}

/// Corrector values on a grid, kept per batch so that Monte Carlo error
/// can be propagated through the nonlocal operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UGrid {
    pub t: f64,
    pub x: f64,
    pub nodes: Vec<f64>,
    pub u: Vec<f64>,
    pub se: Vec<f64>,
    /// `[batch][node]` on step `h`.
    pub batches: Vec<Vec<f64>>,
    /// Same on step `2h` with the same noise.
    pub coarse_batches: Vec<Vec<f64>>,
    pub horizon: f64,
    pub rate: f64,
    pub lip: f64,
    pub mean_abs_y: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn tabulate_u_grid(
    model: &ModelSpec,
    rhs: &Rhs,
    t: f64,
    x: f64,
    nodes: &[f64],
    batches: usize,
    ctx: &CorrectorContext,
    params: &CorrectorParams,
    stream: RngStream,
) -> Result<UGrid> {
    if model.d1 != 1 || model.d2 != 1 {
        return Err(Error::Argument("grid tabulation is for scalar x and y".into()));
    }
    if batches < 2 || params.reps < batches {
        return Err(Error::Argument(format!("need 2 <= batches <= reps, got {batches} and {}", params.reps)));
    }
    if nodes.len() < 5 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("need at least 5 strictly increasing nodes".into()));
    }
    let rate = ctx.rate()?;
    ctx.check_rhs(rhs)?;
    let far = nodes[0].abs().max(nodes[nodes.len() - 1].abs());
    let hz = horizon(rate, &[far], params).min(params.max_horizon);
    let run = run_grid_pairs(model, rhs, t, &[x], nodes, hz, params, stream)?;
    let per_batch = |vals: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        (0..batches)
            .map(|b| {
                let (lo, hi) = (b * vals.len() / batches, (b + 1) * vals.len() / batches);
                (0..nodes.len())
                    .map(|j| vals[lo..hi].iter().map(|o| o[j][0]).sum::<f64>() / (hi - lo) as f64)
                    .collect()
            })
            .collect()
    };
    let fine = per_batch(&run.fine);
    let coarse = per_batch(&run.coarse);
    let mut u = Vec::with_capacity(nodes.len());
    let mut se = Vec::with_capacity(nodes.len());
    for j in 0..nodes.len() {
        let col: Vec<f64> = fine.iter().map(|b| b[j]).collect();
        u.push(stats::mean(&col));
        se.push(stats::standard_error(&col));
    }
    Ok(UGrid {
        t,
        x,
        nodes: nodes.to_vec(),
        u,
        se,
        batches: fine,
        coarse_batches: coarse,
        horizon: run.horizon,
        rate,
        lip: run.lip,
        mean_abs_y: ctx.mean_abs_y.unwrap_or(run.mean_abs_y),
    })
}

/// Residual of `L₂ û + g - ḡ` at probe points with its error budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub probes: Vec<f64>,
    pub residual: Vec<f64>,
    pub se: Vec<f64>,
    pub interpolation: Vec<f64>,
    pub quadrature_tail: Vec<f64>,
    pub discretization: Vec<f64>,
    pub truncation: Vec<f64>,
    pub centering: Vec<f64>,
    pub budget: Vec<f64>,
    pub max_abs_residual: f64,
    pub max_budget: f64,
    /// `|residual| ≤ 3 budget` at every probe.
    pub pass: bool,
}

fn residual_of(model: &ModelSpec, rhs: &Rhs, grid: &UGrid, vals: &[f64], probes: &[f64], quad: &QuadParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = CubicSpline::new(grid.nodes.clone(), vals.to_vec())?;
    let f = |z: f64| s.eval(z);
    let mut out = Vec::with_capacity(probes.len());
    let mut tails = Vec::with_capacity(probes.len());
    let mut fy = [0.0];
    let mut g = [0.0];
    let mut gbar = [0.0];
    rhs.mean(grid.t, &[grid.x], &mut gbar);
    for &y in probes {
        let lap = fractional_laplacian_1d_detailed(&f, y, model.alpha2, quad)?;
        (model.f)(&[grid.x], &[y], &mut fy);
        rhs.eval(model, grid.t, &[grid.x], &[y], &mut g);
        out.push(lap.value + fy[0] * s.deriv(y) + g[0] - gbar[0]);
        tails.push(lap.tail_bound);
    }
    Ok((out, tails))
}

/// `∫ |z|^{-1-α}` over `[a, b]` with `|z| < 1` removed.
fn far_weight(a: f64, b: f64, alpha: f64) -> f64 {
    let prim = |z: f64| z.powf(-alpha) / alpha; // ∫_z^∞
    let side = |lo: f64, hi: f64| {
        let lo = lo.max(1.0);
        if hi <= lo {
            0.0
        } else {
            prim(lo) - prim(hi)
        }
    };
    side(a, b) + side(-b, -a)
}

/// Residual check of a tabulated corrector. The budget per probe is the
/// Monte Carlo SE plus bounds for spline interpolation, the quadrature
/// tail, Euler discretization (`h` against `2h`), horizon truncation and
/// the centering error of `g`.
pub fn poisson_residual(
    model: &ModelSpec,
    rhs: &Rhs,
    grid: &UGrid,
    probes: &[f64],
    ctx: &CorrectorContext,
    quad: &QuadParams,
) -> Result<ResidualReport> {
    let (lo, hi) = (grid.nodes[0], grid.nodes[grid.nodes.len() - 1]);
    for &y in probes {
        if y - quad.outer_cut < lo || y + quad.outer_cut > hi {
            return Err(Error::Configuration(format!(
                "grid [{lo}, {hi}] does not cover probe {y} +- outer_cut {}",
                quad.outer_cut
            )));
        }
    }
    let sup = grid.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let quad = QuadParams { tail: TailModel::Bounded { sup }, ..*quad };
    let fine: Vec<(Vec<f64>, Vec<f64>)> = grid
        .batches
        .par_iter()
        .map(|b| residual_of(model, rhs, grid, b, probes, &quad))
        .collect::<Result<_>>()?;
    let coarse: Vec<Vec<f64>> = grid
        .coarse_batches
        .par_iter()
        .map(|b| residual_of(model, rhs, grid, b, probes, &quad).map(|r| r.0))
        .collect::<Result<_>>()?;
    let np = probes.len();
    let alpha = model.alpha2;
    let c = levy_measure_constant(alpha, 1);
    let m4 = local_fourth_derivative(&grid.nodes, &grid.u);
    let dx: Vec<f64> = grid.nodes.windows(2).map(|w| w[1] - w[0]).collect();
    let e0: Vec<f64> = dx.iter().zip(&m4).map(|(d, m)| 5.0 / 384.0 * d.powi(4) * m).collect();
    let e1: Vec<f64> = dx.iter().zip(&m4).map(|(d, m)| d.powi(3) * m / 24.0).collect();
    let e2: Vec<f64> = dx.iter().zip(&m4).map(|(d, m)| 0.375 * d.powi(2) * m).collect();
    let center = match (rhs, &ctx.centering) {
        (Rhs::H, Some((est, se))) => est[0].abs() + se[0],
        _ => 0.0,
    };
    let mut rep = ResidualReport {
        probes: probes.to_vec(),
        residual: vec![0.0; np],
        se: vec![0.0; np],
        interpolation: vec![0.0; np],
        quadrature_tail: vec![0.0; np],
        discretization: vec![0.0; np],
        truncation: vec![0.0; np],
        centering: vec![center; np],
        budget: vec![0.0; np],
        max_abs_residual: 0.0,
        max_budget: 0.0,
        pass: true,
    };
    let mut fy = [0.0];
    for (p, &y) in probes.iter().enumerate() {
        let col: Vec<f64> = fine.iter().map(|r| r.0[p]).collect();
        let ccol: Vec<f64> = coarse.iter().map(|r| r[p]).collect();
        rep.residual[p] = stats::mean(&col);
        rep.se[p] = stats::standard_error(&col);
        rep.discretization[p] = (rep.residual[p] - stats::mean(&ccol)).abs();
        rep.quadrature_tail[p] = fine[0].1[p];
        rep.truncation[p] = grid.lip * (-grid.rate * grid.horizon).exp() * (y.abs() + grid.mean_abs_y);
        let near: Vec<usize> = (0..dx.len())
            .filter(|&i| grid.nodes[i + 1] >= y - 1.0 && grid.nodes[i] <= y + 1.0)
            .collect();
        let here = grid.nodes.partition_point(|&v| v <= y).saturating_sub(1).min(dx.len() - 1);
        let e2_loc = near.iter().map(|&i| e2[i]).fold(0.0, f64::max);
        let far: f64 = (0..dx.len())
            .map(|i| e0[i] * far_weight(grid.nodes[i] - y, grid.nodes[i + 1] - y, alpha))
            .sum();
        (model.f)(&[grid.x], &[y], &mut fy);
        rep.interpolation[p] =
            c * (e2_loc / (2.0 - alpha) + 2.0 * e0[here] / alpha + far) + fy[0].abs() * e1[here];
        rep.budget[p] = rep.se[p]
            + rep.interpolation[p]
            + rep.quadrature_tail[p]
            + rep.discretization[p]
            + rep.truncation[p]
            + rep.centering[p];
        rep.pass &= rep.residual[p].abs() <= 3.0 * rep.budget[p];
        rep.max_abs_residual = rep.max_abs_residual.max(rep.residual[p].abs());
        rep.max_budget = rep.max_budget.max(rep.budget[p]);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_benchmark, LinearParams};

    #[test]
    fn node_layout() {
        let n = default_residual_nodes();
        assert_eq!(n[0], -60.0);
        assert_eq!(*n.last().unwrap(), 60.0);
        assert!(n.windows(2).all(|w| w[1] > w[0]));
        assert!(n.iter().any(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn far_weight_matches_closed_form() {
        // whole line outside (-1,1): 2/α
        assert!((far_weight(-1e9, 1e9, 1.5) - 2.0 / 1.5).abs() < 1e-5);
        assert_eq!(far_weight(-0.5, 0.5, 1.5), 0.0);
    }

    #[test]
    fn linear_corrector_residual_is_within_budget() {
        let m = make_linear_benchmark(LinearParams::default()).unwrap();
        let ctx = CorrectorContext::new(1.0).with_centering(vec![0.0], vec![0.0]);
        let p = CorrectorParams { reps: 60, ..CorrectorParams::default() };
        let nodes: Vec<f64> = (0..=100).map(|i| -10.0 + 0.2 * i as f64).collect();
        let grid = tabulate_u_grid(&m, &Rhs::H, 0.0, 1.0, &nodes, 6, &ctx, &p, RngStream::new(9, 0)).unwrap();
        let quad = QuadParams { outer_cut: 5.0, panels: 1024, ..QuadParams::default() };
        let rep = poisson_residual(&m, &Rhs::H, &grid, &[-1.0, 0.0, 0.5, 2.0], &ctx, &quad).unwrap();
        assert!(rep.pass, "{rep:?}");
        let too_wide = QuadParams { outer_cut: 50.0, ..quad };
        assert!(matches!(
            poisson_residual(&m, &Rhs::H, &grid, &[0.0], &ctx, &too_wide),
            Err(Error::Configuration(_))
        ));
    }
}
