//! Quadrature for rough and weakly singular integrands.
//!
//! Three ingredients used throughout the crate:
//!
//! * left-point Riemann–Stieltjes (Young) sums against sampled drivers,
//! * exact per-cell weights for the singular kernel `|s-r|^{2H-2}` via second
//!   differences of its antiderivative `Phi(u) = |u|^{2H} / (2H(2H-1))`, and
//! * the fractional norm `||g|| = int |g(s)| s^{-beta} ds +
//!   beta * int int |g(t)-g(s)| |t-s|^{-1-beta} ds dt`.
//!
//! All double integrals use product integration: the non-singular factor is
//! frozen at the cell's lower-left node while the singular kernel is
//! integrated in closed form over the cell. Point-sampling the kernel itself
//! would diverge on diagonal cells and lose an order of accuracy elsewhere.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fbm::{HurstParam, TimeGrid};
use crate::util::pairwise_sum;

/// Stable evaluation of `(k+1)^p + (k-1)^p - 2 k^p` for `k >= 1`.
///
/// The naive form loses ~`k^2` ulps to cancellation; rewriting as
/// `k^p (expm1(p ln1p(1/k)) + expm1(p ln1p(-1/k)))` keeps the relative error
/// near machine precision for all lags. At `k = 1` the second term collapses
/// to `-1` through `ln1p(-1) = -inf`, giving `2^p - 2` exactly as required.
pub(crate) fn power_second_difference(k: usize, p: f64) -> f64 {
    debug_assert!(k >= 1);
    let kf = k as f64;
    let x = 1.0 / kf;
    kf.powf(p) * ((p * x.ln_1p()).exp_m1() + (p * (-x).ln_1p()).exp_m1())
}

/// Exact cell weights for the kernel `|s-r|^{2H-2}` on a uniform grid.
///
/// Conceptually an `N x N` matrix `w[i][j] = kernel_cell_weight` of cell
/// `i x j`; by stationarity on a uniform grid it depends only on `|i-j|`, so
/// only the Toeplitz band is stored. All entries are positive and the total
/// satisfies `sum w[i][j] = T^{2H} / (H(2H-1))`.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    grid: TimeGrid,
    h: HurstParam,
    /// `band[k] = w[i][i+k]`, in time^{2H} units.
    band: Vec<f64>,
}

impl KernelWeights {
    pub fn new(grid: TimeGrid, h: HurstParam) -> Result<Self> {
        if h.is_brownian_test() {
            // 2H - 2 = -1 is not integrable across the diagonal.
            return Err(Error::InvalidHurst(h.value()));
        }
        let n = grid.steps();
        let two_h = 2.0 * h.value();
        let norm = 1.0 / (two_h * (two_h - 1.0));
        let scale = grid.dt().powf(two_h) * norm;
        let mut band = Vec::with_capacity(n);
        band.push(2.0 * scale);
        for k in 1..n {
            let w = power_second_difference(k, two_h) * scale;
            debug_assert!(w > 0.0);
            band.push(w);
        }
        Ok(Self { grid, h, band })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.h
    }

    /// Weight of the cell pair `(i, j)`, `0 <= i, j < N`.
    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.band[i.abs_diff(j)]
    }

    /// The stored band: `band()[k] = w(i, i+k)`.
    pub fn band(&self) -> &[f64] {
        &self.band
    }

    /// `sum_{i,j} w[i][j]`, equal to `T^{2H} / (H(2H-1))` up to rounding.
    pub fn total(&self) -> f64 {
        let n = self.band.len();
        let terms: Vec<f64> = (0..n)
            .map(|k| {
                let mult = if k == 0 {
                    n as f64
                } else {
                    2.0 * (n - k) as f64
                };
                mult * self.band[k]
            })
            .collect();
        pairwise_sum(&terms)
    }
}

/// Left-point Riemann–Stieltjes sum `sum_i g[i] (driver[i+1] - driver[i])`.
///
/// For H > 1/2 drivers and Hölder integrands these sums converge to the
/// pathwise Young integral under grid refinement.
pub fn rs_integral(g: &[f64], driver: &[f64]) -> Result<f64> {
    if g.len() != driver.len() || g.len() < 2 {
        return Err(Error::LengthMismatch(format!(
            "integrand has {} nodes, driver has {}",
            g.len(),
            driver.len()
        )));
    }
    let terms: Vec<f64> = (0..g.len() - 1)
        .map(|i| g[i] * (driver[i + 1] - driver[i]))
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Antiderivative `Phi(u) = |u|^{2H} / (2H(2H-1))` whose mixed second
/// difference integrates the kernel over a rectangle.
fn phi(u: f64, two_h: f64) -> f64 {
    u.abs().powf(two_h) / (two_h * (two_h - 1.0))
}

/// Exact `int_{a1}^{b1} int_{a2}^{b2} |s - r|^{2H-2} ds dr`.
///
/// Finite even when the rectangles touch or straddle the diagonal; a
/// degenerate rectangle yields 0.
pub fn kernel_cell_weight(a1: f64, b1: f64, a2: f64, b2: f64, h: HurstParam) -> Result<f64> {
    for v in [a1, b1, a2, b2] {
        if !v.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite rectangle coordinate {v}"
            )));
        }
    }
    if b1 < a1 || b2 < a2 {
        return Err(Error::InvalidParameter(format!(
            "inverted rectangle [{a1},{b1}]x[{a2},{b2}]"
        )));
    }
    if h.is_brownian_test() {
        return Err(Error::InvalidHurst(h.value()));
    }
    let two_h = 2.0 * h.value();
    Ok(phi(b2 - a1, two_h) + phi(a2 - b1, two_h) - phi(b2 - b1, two_h) - phi(a2 - a1, two_h))
}

/// Product-integration value `sum_{i,j} F[i][j] w[i][j]` (no `alpha_H`
/// prefactor), with `F` sampled at lower-left cell nodes.
pub fn singular_double_integral(f: &DMatrix<f64>, weights: &KernelWeights) -> Result<f64> {
    let n = weights.grid().steps();
    if f.nrows() != n || f.ncols() != n {
        return Err(Error::LengthMismatch(format!(
            "field is {}x{}, grid has {} cells",
            f.nrows(),
            f.ncols(),
            n
        )));
    }
    let rows: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                acc += f[(i, j)] * weights.w(i, j);
            }
            acc
        })
        .collect();
    Ok(pairwise_sum(&rows))
}

/// [`singular_double_integral`] with `F` given as a function of the node
/// times: row `i` maps to `s = t_i`, column `j` to `r = t_j`.
pub fn singular_double_integral_fn<F>(weights: &KernelWeights, f: F) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let grid = weights.grid();
    let n = grid.steps();
    let rows: Vec<f64> = (0..n)
        .map(|i| {
            let s = grid.node(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += f(s, grid.node(j)) * weights.w(i, j);
            }
            acc
        })
        .collect();
    pairwise_sum(&rows)
}

/// Fractional norm of a left-node step function:
///
/// ```text
/// ||g|| = int_0^T |g(s)| s^{-beta} ds
///       + beta * int int_{[0,T]^2} |g(t) - g(s)| |t-s|^{-1-beta} ds dt
/// ```
///
/// Both singular factors are integrated exactly per cell. Diagonal cells of
/// the double integral carry the factor `|g_i - g_i| = 0` and are dropped:
/// the kernel alone is not integrable there, the product is identically zero.
pub fn fractional_norm(g: &[f64], grid: &TimeGrid, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta {beta} outside (0,1)"
        )));
    }
    let n = grid.steps();
    if g.len() != grid.num_nodes() {
        return Err(Error::LengthMismatch(format!(
            "step vector of length {} on a grid with {} nodes",
            g.len(),
            grid.num_nodes()
        )));
    }
    let p = 1.0 - beta;

    // First term: |g_i| * (t_{i+1}^{1-beta} - t_i^{1-beta}) / (1-beta).
    let mut first_terms = Vec::with_capacity(n);
    let mut prev = 0.0;
    for (i, gi) in g.iter().take(n).enumerate() {
        let next = grid.lag(i + 1).powf(p);
        first_terms.push(gi.abs() * (next - prev));
        prev = next;
    }
    let first = pairwise_sum(&first_terms) / p;

    // Second term: |t-s|^{-1-beta} has second antiderivative
    // -|u|^{1-beta} / (beta (1-beta)); its second difference over lag k is
    // positive because u^{1-beta} is concave.
    let scale = grid.dt().powf(p) / (beta * p);
    let band: Vec<f64> = (1..n)
        .map(|k| -power_second_difference(k, p) * scale)
        .collect();
    let rows: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, gj) in g.iter().take(n).enumerate() {
                if j != i {
                    acc += (g[i] - gj).abs() * band[i.abs_diff(j) - 1];
                }
            }
            acc
        })
        .collect();
    Ok(first + beta * pairwise_sum(&rows))
}

/// Default `beta` for pathwise diagnostics: `(1-H) + 0.1 (2H-1)`, strictly
/// inside `(1-H, H)` for every `H` in `(1/2, 1)`.
pub fn default_beta(h: HurstParam) -> f64 {
    (1.0 - h.value()) + 0.1 * (2.0 * h.value() - 1.0)
}
