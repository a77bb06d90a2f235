//! Fractional Brownian motion on uniform grids.
//!
//! Provides the fBm covariance `R(t,s) = (t^{2H} + s^{2H} - |t-s|^{2H})/2`,
//! exact Gaussian sampling of paths on a [`TimeGrid`] by Cholesky
//! factorization or circulant embedding of the increment process, and the
//! weighted inner product
//!
//! ```text
//! <phi1, phi2>_H = H(2H-1) * integral integral phi1(t) phi2(s) |t-s|^{2H-2} ds dt
//! ```
//!
//! on grid step functions, which reproduces `R` exactly on indicators.
//!
//! ## Step-function convention
//!
//! A node vector `v[0..=N]` represents the left-node step function equal to
//! `v[i]` on the cell `[t_i, t_{i+1})`; `v[N]` never enters quadrature. The
//! indicator of `[0, t_k)` is the vector with ones at nodes `0..k`, for which
//! the inner product identities with `R` are exact.
//!
//! ## Reproducibility
//!
//! Each path is generated from an independent counter-based stream keyed by
//! `(seed, path index)`; the draw index is the position within the stream.
//! Sampling a path never consults shared mutable state, so results are
//! bit-identical across runs and across worker counts.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::quad::KernelWeights;
use crate::util::pairwise_sum;

/// Relative tolerance for negative circulant eigenvalues: values in
/// `[-TOL * max, 0)` are clamped to zero, anything lower is a hard error.
const SPECTRUM_CLAMP_REL_TOL: f64 = 1e-10;

/// Validated Hurst parameter, strictly inside `(1/2, 1)`.
///
/// The regime `H > 1/2` is what makes the kernel `|t-s|^{2H-2}` integrable
/// and the pathwise Riemann–Stieltjes sums convergent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HurstParam {
    h: f64,
}

impl HurstParam {
    /// Accepts only `1/2 < h < 1`.
    pub fn new(h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.5 && h < 1.0) {
            return Err(Error::InvalidHurst(h));
        }
        Ok(Self { h })
    }

    /// Test-only value `h = 1/2` (standard Brownian motion), used as an
    /// oracle for the samplers. Quadrature against the singular kernel
    /// rejects it: `2H - 2 = -1` is not integrable.
    pub fn half_for_tests() -> Self {
        Self { h: 0.5 }
    }

    /// The raw value.
    pub fn value(self) -> f64 {
        self.h
    }

    /// `alpha_H = H(2H-1)`, the kernel weight constant.
    pub fn alpha(self) -> f64 {
        self.h * (2.0 * self.h - 1.0)
    }

    /// True for the test-only Brownian value.
    pub fn is_brownian_test(self) -> bool {
        self.h == 0.5
    }
}

/// fBm covariance `R(t,s) = (t^{2H} + s^{2H} - |t-s|^{2H}) / 2` on `[0, inf)^2`.
pub fn covariance(t: f64, s: f64, h: HurstParam) -> Result<f64> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::NegativeTime(t));
    }
    if s < 0.0 || !s.is_finite() {
        return Err(Error::NegativeTime(s));
    }
    let two_h = 2.0 * h.value();
    Ok(0.5 * (t.powf(two_h) + s.powf(two_h) - (t - s).abs().powf(two_h)))
}

/// Uniform grid `t_i = i * T / N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// Horizon must be positive and finite; at least one step.
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "horizon {horizon} must be positive and finite"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("steps must be >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(self) -> f64 {
        self.horizon
    }

    pub fn steps(self) -> usize {
        self.steps
    }

    /// Number of nodes, `N + 1`.
    pub fn num_nodes(self) -> usize {
        self.steps + 1
    }

    pub fn dt(self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_i = i * dt`. Lags between nodes are always formed as
    /// `(j - i) as f64 * dt` so that `|t_j - t_i|` carries no cancellation.
    pub fn node(self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    /// Exact lag `(k) * dt` for `k` grid steps.
    pub fn lag(self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn nodes(self) -> Vec<f64> {
        (0..self.num_nodes()).map(|i| self.node(i)).collect()
    }
}

/// One fBm path sampled on a grid; `values[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FbmPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl FbmPath {
    /// Wraps node values; the length must be `grid.num_nodes()`, the path
    /// must start at 0, and every entry must be finite.
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::LengthMismatch(format!(
                "path has {} values for a grid with {} nodes",
                values.len(),
                grid.num_nodes()
            )));
        }
        if values[0] != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "fBm paths start at 0, got {}",
                values[0]
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite path value {bad}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Increment `B_{t_{i+1}} - B_{t_i}`.
    pub fn increment(&self, i: usize) -> f64 {
        self.values[i + 1] - self.values[i]
    }
}

/// Sampling method for [`FbmSampler`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    /// Dense Cholesky factor of the increment covariance; exact, O(N^3) setup.
    Cholesky,
    /// Circulant embedding of the increment covariance; exact when the
    /// embedding spectrum is nonnegative, O(N log N) per path.
    Circulant {
        /// On a hard-negative spectrum, fall back to Cholesky instead of
        /// erroring out.
        cholesky_fallback: bool,
    },
}

impl Default for SampleMethod {
    fn default() -> Self {
        SampleMethod::Circulant {
            cholesky_fallback: false,
        }
    }
}

/// Unit-spacing fractional Gaussian noise autocovariance
/// `gamma(k) = (|k+1|^{2H} - 2|k|^{2H} + |k-1|^{2H}) / 2`.
fn fgn_autocovariance(k: usize, two_h: f64) -> f64 {
    let k = k as f64;
    0.5 * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
}

enum Engine {
    Cholesky {
        /// Lower-triangular factor of the N x N fGn covariance.
        factor: DMatrix<f64>,
    },
    Circulant {
        /// `sqrt(lambda_k / M)` for k = 0 and k = M/2, `sqrt(lambda_k / (2M))`
        /// for the conjugate pairs, pre-divided for the sampling recipe.
        scale: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
}

/// Exact fBm sampler bound to a grid, Hurst parameter, seed, and method.
pub struct FbmSampler {
    grid: TimeGrid,
    h: HurstParam,
    seed: u64,
    method: SampleMethod,
    engine: Engine,
}

impl FbmSampler {
    pub fn new(grid: TimeGrid, h: HurstParam, seed: u64, method: SampleMethod) -> Result<Self> {
        let engine = match method {
            SampleMethod::Cholesky => Self::cholesky_engine(grid, h)?,
            SampleMethod::Circulant { cholesky_fallback } => {
                match Self::circulant_engine(grid, h) {
                    Ok(engine) => engine,
                    Err(err @ Error::NegativeSpectrum { .. }) => {
                        if cholesky_fallback {
                            Self::cholesky_engine(grid, h)?
                        } else {
                            return Err(err);
                        }
                    }
                    Err(err) => return Err(err),
                }
            }
        };
        Ok(Self {
            grid,
            h,
            seed,
            method,
            engine,
        })
    }

    fn cholesky_engine(grid: TimeGrid, h: HurstParam) -> Result<Engine> {
        let n = grid.steps();
        let two_h = 2.0 * h.value();
        let cov = DMatrix::from_fn(n, n, |i, j| fgn_autocovariance(i.abs_diff(j), two_h));
        let chol = nalgebra::Cholesky::new(cov).ok_or_else(|| {
            Error::InvalidParameter("fGn covariance is not positive definite".into())
        })?;
        Ok(Engine::Cholesky {
            factor: chol.unpack(),
        })
    }

    fn circulant_engine(grid: TimeGrid, h: HurstParam) -> Result<Engine> {
        let n = grid.steps();
        let m = 2 * n;
        let two_h = 2.0 * h.value();
        // First row of the circulant embedding of the fGn covariance.
        let mut row: Vec<Complex<f64>> = (0..m)
            .map(|j| {
                let k = if j <= n { j } else { m - j };
                Complex::new(fgn_autocovariance(k, two_h), 0.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        fft.process(&mut row);

        let eigen_max = row.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
        let eigen_min = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if eigen_min < -SPECTRUM_CLAMP_REL_TOL * eigen_max {
            return Err(Error::NegativeSpectrum {
                min: eigen_min,
                max: eigen_max,
                tol: SPECTRUM_CLAMP_REL_TOL,
            });
        }

        let m_f = m as f64;
        let scale: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let lambda = c.re.max(0.0);
                if k == 0 || k == n {
                    (lambda / m_f).sqrt()
                } else {
                    (lambda / (2.0 * m_f)).sqrt()
                }
            })
            .collect();
        Ok(Engine::Circulant { scale, fft })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.h
    }

    pub fn method(&self) -> SampleMethod {
        self.method
    }

    /// Counter-based stream for one path: ChaCha keyed by the seed with the
    /// path index as the stream number; the draw index is the position.
    fn path_rng(&self, index: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Samples the path with the given index; bit-identical for fixed
    /// `(seed, index)` regardless of how many other paths are drawn, in
    /// which order, or on how many threads.
    pub fn sample_path(&self, index: u64) -> FbmPath {
        let n = self.grid.steps();
        let mut rng = self.path_rng(index);
        let fgn_unit: Vec<f64> = match &self.engine {
            Engine::Cholesky { factor } => {
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                (factor * z).iter().copied().collect()
            }
            Engine::Circulant { scale, fft } => {
                let m = scale.len();
                let half = m / 2;
                let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut spec = vec![Complex::new(0.0, 0.0); m];
                spec[0] = Complex::new(scale[0] * z[0], 0.0);
                spec[half] = Complex::new(scale[half] * z[1], 0.0);
                for k in 1..half {
                    let re = scale[k] * z[2 * k];
                    let im = scale[k] * z[2 * k + 1];
                    spec[k] = Complex::new(re, im);
                    spec[m - k] = Complex::new(re, -im);
                }
                let mut buf = spec;
                fft.process(&mut buf);
                buf.iter().take(n).map(|c| c.re).collect()
            }
        };
        // Unit-spacing fGn scales to spacing dt by dt^H; cumulative sums give
        // the path with B_0 = 0.
        let amp = self.grid.dt().powf(self.h.value());
        let mut values = Vec::with_capacity(n + 1);
        values.push(0.0);
        let mut acc = 0.0;
        for &g in &fgn_unit {
            acc += amp * g;
            values.push(acc);
        }
        FbmPath {
            grid: self.grid,
            values,
        }
    }

    /// Samples `count` paths with indices `0..count`, in index order.
    pub fn sample_many(&self, count: u64) -> Vec<FbmPath> {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|i| self.sample_path(i))
            .collect()
    }
}

/// Samples `count` fBm paths. Convenience wrapper over [`FbmSampler`].
pub fn sample_fbm(
    grid: TimeGrid,
    h: HurstParam,
    count: u64,
    seed: u64,
    method: SampleMethod,
) -> Result<Vec<FbmPath>> {
    Ok(FbmSampler::new(grid, h, seed, method)?.sample_many(count))
}

/// Inner product `H(2H-1) * sum_{i,j} phi1[i] phi2[j] w[i][j]` of two
/// left-node step functions against the exact per-cell kernel weights.
///
/// Exact (up to rounding) for step functions; in particular it reproduces
/// `R(t_k, t_l)` on indicators of `[0, t_k)` and `[0, t_l)`.
pub fn inner_product_h(phi1: &[f64], phi2: &[f64], grid: &TimeGrid, h: HurstParam) -> Result<f64> {
    let weights = KernelWeights::new(*grid, h)?;
    inner_product_h_with(phi1, phi2, &weights)
}

/// Same as [`inner_product_h`] but reusing a prebuilt [`KernelWeights`].
pub fn inner_product_h_with(phi1: &[f64], phi2: &[f64], weights: &KernelWeights) -> Result<f64> {
    let n = weights.grid().steps();
    if phi1.len() != n + 1 || phi2.len() != n + 1 {
        return Err(Error::LengthMismatch(format!(
            "step vectors of lengths {} and {} on a grid with {} nodes",
            phi1.len(),
            phi2.len(),
            n + 1
        )));
    }
    let mut row_sums = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for (j, &p2) in phi2.iter().take(n).enumerate() {
            acc += p2 * weights.w(i, j);
        }
        row_sums[i] = phi1[i] * acc;
    }
    Ok(weights.hurst().alpha() * pairwise_sum(&row_sums))
}

/// Writes paths as CSV: header `t,path_0,...,path_{k-1}`, one row per node,
/// full double precision (17 significant digits), `.` decimal separator.
pub fn write_paths_csv<W: Write>(out: &mut W, paths: &[FbmPath]) -> Result<()> {
    write_series_csv(out, paths.iter().map(|p| (p.grid(), p.values())))
}

/// Shared CSV writer for grid-indexed value series (fBm paths, solutions).
pub(crate) fn write_series_csv<'a, W, I>(out: &mut W, series: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (TimeGrid, &'a [f64])>,
{
    let collected: Vec<(TimeGrid, &[f64])> = series.into_iter().collect();
    let Some(&(grid, _)) = collected.first() else {
        writeln!(out, "t")?;
        return Ok(());
    };
    for &(g, _) in &collected {
        if g != grid {
            return Err(Error::GridMismatch(
                "CSV export requires all series on one grid".into(),
            ));
        }
    }
    write!(out, "t")?;
    for k in 0..collected.len() {
        write!(out, ",path_{k}")?;
    }
    writeln!(out)?;
    for i in 0..grid.num_nodes() {
        write!(out, "{:.16e}", grid.node(i))?;
        for &(_, values) in &collected {
            write!(out, ",{:.16e}", values[i])?;
        }
        writeln!(out)?;
    }
    Ok(())
}
