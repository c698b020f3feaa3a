//! Symmetric α-stable drivers.
//!
//! All samplers are normalized to the symbol `|u|^α`: an increment over a
//! time step `dt` has characteristic function `exp(-dt * scale * |u|^α)`.
//! One-dimensional draws use the Chambers–Mallows–Stuck transform; the
//! isotropic multi-dimensional sampler subordinates a Gaussian vector to a
//! totally skewed positive (α/2)-stable time change.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator type handed out by [`RngStream::rng`].
pub type StreamRng = ChaCha8Rng;

/// Largest number of scalar entries a single increment matrix may hold.
pub const MAX_INCREMENT_ENTRIES: usize = 1 << 31;

/// A counter-based substream identified by `(seed, stream_id)`.
///
/// Streams are plain values: identical pairs replay identical sequences, and
/// distinct `stream_id`s select disjoint ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Derive a child stream. Children of distinct indices never collide with
    /// each other for a fixed parent.
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x9E37_79B9))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parameters of an isotropic α-stable driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableNoiseSpec {
    pub alpha: f64,
    pub dim: usize,
    pub scale: f64,
}

impl StableNoiseSpec {
    pub fn new(alpha: f64, dim: usize, scale: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if dim == 0 {
            return Err(Error::Parameter("dimension must be at least 1".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { alpha, dim, scale })
    }

    /// Unit-scale driver, the normalization used by every model.
    pub fn standard(alpha: f64, dim: usize) -> Result<Self> {
        Self::new(alpha, dim, 1.0)
    }

    /// α = 2 is only admitted as a Gaussian test limit.
    pub fn is_gaussian_limit(&self) -> bool {
        self.alpha == 2.0
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(Error::Parameter(format!(
            "stability index must lie in (1, 2], got {alpha}"
        )));
    }
    Ok(())
}

fn check_step(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parameter(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

/// Standard symmetric α-stable variate with characteristic function
/// `exp(-|u|^α)` (Chambers–Mallows–Stuck).
#[inline]
pub fn standard_symmetric_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    let w: f64 = rng.sample(Exp1);
    if alpha == 2.0 {
        return 2.0 * v.sin() * w.sqrt();
    }
    let cos_v = v.cos();
    (alpha * v).sin() / cos_v.powf(1.0 / alpha)
        * ((v - alpha * v).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Totally skewed positive stable variate with Laplace transform
/// `E exp(-λS) = exp(-λ^index)`, `0 < index < 1` (Kanter's representation).
#[inline]
pub fn positive_stable<R: Rng + ?Sized>(index: f64, rng: &mut R) -> f64 {
    if index >= 1.0 {
        return 1.0;
    }
    // open interval (0, π) keeps sin(θ) away from zero
    let theta = PI * (1.0 - rng.random::<f64>());
    let theta = theta.min(PI - f64::EPSILON);
    let w: f64 = rng.sample(Exp1);
    (index * theta).sin() / theta.sin().powf(1.0 / index)
        * (((1.0 - index) * theta).sin() / w).powf((1.0 - index) / index)
}

/// One increment over `dt` of a symmetric α-stable process with
/// characteristic function `exp(-dt * scale * |u|^α)`.
pub fn stable_increment_1d<R: Rng + ?Sized>(
    alpha: f64,
    scale: f64,
    dt: f64,
    rng: &mut R,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_step(dt)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter(format!("scale must be positive, got {scale}")));
    }
    Ok((scale * dt).powf(1.0 / alpha) * standard_symmetric_stable(alpha, rng))
}

/// Isotropic increment over `dt` with characteristic function
/// `exp(-dt |u|^α)`, `u ∈ R^dim`.
///
/// The subordinator `S` has Laplace exponent `λ^{α/2}`; `√(2S)` then carries
/// the `2^{α/2}` calibration so that `√(2S)·G` has symbol `|u|^α`.
pub fn isotropic_stable_increment<R: Rng + ?Sized>(
    alpha: f64,
    dim: usize,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_step(dt)?;
    if dim == 0 {
        return Err(Error::Parameter("dimension must be at least 1".into()));
    }
    let mut out = vec![0.0; dim];
    fill_isotropic(alpha, dt.powf(1.0 / alpha), rng, &mut out);
    Ok(out)
}

#[inline]
fn fill_isotropic<R: Rng + ?Sized>(alpha: f64, step_scale: f64, rng: &mut R, out: &mut [f64]) {
    let s = positive_stable(0.5 * alpha, rng);
    let amp = step_scale * (2.0 * s).sqrt();
    for v in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v = amp * g;
    }
}

/// Fill `out` with one increment of the driver described by `spec` over `dt`.
///
/// `dim == 1` uses CMS directly, larger dimensions use subordination.
#[inline]
pub fn fill_increment<R: Rng + ?Sized>(spec: &StableNoiseSpec, dt: f64, rng: &mut R, out: &mut [f64]) {
    let step_scale = (spec.scale * dt).powf(1.0 / spec.alpha);
    if spec.dim == 1 {
        out[0] = step_scale * standard_symmetric_stable(spec.alpha, rng);
    } else {
        fill_isotropic(spec.alpha, step_scale, rng, out);
    }
}

/// `n_steps` independent increments over `dt`, one row per step.
pub fn increment_sequence(
    spec: &StableNoiseSpec,
    n_steps: usize,
    dt: f64,
    stream: &RngStream,
) -> Result<Array2<f64>> {
    if n_steps == 0 {
        return Err(Error::Argument("n_steps must be at least 1".into()));
    }
    check_step(dt)?;
    check_alpha(spec.alpha)?;
    let entries = n_steps
        .checked_mul(spec.dim)
        .filter(|&e| e <= MAX_INCREMENT_ENTRIES)
        .ok_or_else(|| {
            Error::Capacity(format!("{n_steps} steps x {} dims exceeds capacity", spec.dim))
        })?;
    let mut rng = stream.rng();
    let mut data = vec![0.0; entries];
    for row in data.chunks_exact_mut(spec.dim) {
        fill_increment(spec, dt, &mut rng, row);
    }
    Ok(Array2::from_shape_vec((n_steps, spec.dim), data).expect("shape matches buffer"))
}

/// Max over `u_grid` of `|mean cos(u s) - exp(-dt |u|^α)|`.
pub fn empirical_cf_check(samples: &[f64], u_grid: &[f64], alpha: f64, dt: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("empirical_cf_check needs at least one sample".into()));
    }
    if u_grid.is_empty() {
        return Err(Error::Argument("empirical_cf_check needs a non-empty u grid".into()));
    }
    let n = samples.len() as f64;
    let dev = u_grid
        .iter()
        .map(|&u| {
            let ecf = samples.iter().map(|&s| (u * s).cos()).sum::<f64>() / n;
            (ecf - (-dt * u.abs().powf(alpha)).exp()).abs()
        })
        .fold(0.0, f64::max);
    Ok(dev)
}

/// Constant of the symmetric Lévy measure `c |z|^{-d-α} dz` whose generator
/// has symbol `|u|^α`.
pub fn levy_measure_constant(alpha: f64, dim: usize) -> f64 {
    use statrs::function::gamma::gamma;
    let d = dim as f64;
    alpha * 2f64.powf(alpha - 1.0) * gamma(0.5 * (alpha + d))
        / (PI.powf(0.5 * d) * gamma(1.0 - 0.5 * alpha))
}

/// `E|S|` for a standard symmetric α-stable `S`, `α > 1`.
pub fn stable_first_absolute_moment(alpha: f64) -> f64 {
    use statrs::function::gamma::gamma;
    2.0 * gamma(1.0 - 1.0 / alpha) / PI
}
