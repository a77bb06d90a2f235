//! Malliavin derivative fields `D_r X_s` on the grid.
//!
//! For the solution of `dX = b(X) dt + sigma(X) dB^H` the derivative has the
//! first-variation representation
//!
//! ```text
//! D_r X_s = sigma(X_r) J_s / J_r,   r <= s,
//! J_s     = exp( int_0^s b'(X_u) du + int_0^s sigma'(X_u) dB_u ),
//! ```
//!
//! with both integrals realized as left-point sums on the grid. The shipped
//! model families also have closed forms (fBm: `1_{r<=s}`; fOU:
//! `nu e^{-(s-r)}`; Doss–Sussmann: `sigma(X_s)`), used as independent
//! oracles and as the fast path in ensemble runs.
//!
//! Fields vanish identically for `r > s` (adaptedness); on the diagonal the
//! convention is `D_{t_i} X_{t_i} = sigma(X_{t_i})`, the `r ↑ s` limit —
//! the trace integrals never see the diagonal's measure, but quadrature
//! cells touching it need a defined value.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fbm::{FbmPath, TimeGrid};
use crate::sde::{Coefficients, ModelSpec, SolutionPath};

/// Default cap on grid steps for materialized fields: `(N+1)^2` doubles of
/// memory, about 134 MB at the cap.
pub const MAX_FIELD_STEPS: usize = 4096;

/// Bound on the first-variation exponent before `exp` leaves the reliably
/// representable range.
const MAX_EXPONENT: f64 = 700.0;

/// Dense derivative field `d[(i, j)] ≈ D_{t_i} X_{t_j}`, lower index = `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeField {
    grid: TimeGrid,
    d: DMatrix<f64>,
}

impl DerivativeField {
    fn from_fn(grid: TimeGrid, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        if grid.steps() > MAX_FIELD_STEPS {
            return Err(Error::InvalidParameter(format!(
                "grid with {} steps exceeds the dense-field cap of {MAX_FIELD_STEPS}",
                grid.steps()
            )));
        }
        let m = grid.num_nodes();
        // Adaptedness: zero above the anti-diagonal orientation r > s.
        let d = DMatrix::from_fn(m, m, |i, j| if i > j { 0.0 } else { f(i, j) });
        if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite derivative field entry {bad}"
            )));
        }
        Ok(Self { grid, d })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Entry `D_{t_i} X_{t_j}`; 0 for `i > j`.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Largest absolute entrywise difference.
    pub fn sup_distance(&self, other: &DerivativeField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "sup distance needs fields on one grid".into(),
            ));
        }
        Ok(self
            .d
            .iter()
            .zip(other.d.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Cumulative first-variation exponents
/// `E_i = sum_{k<i} (b'(X_k) dt + sigma'(X_k) (B_{k+1}-B_k))`, with
/// `E_0 = 0`; `J_i = exp(E_i)`.
///
/// Shared with the trace assembly, which needs `exp(E_j - E_i)` factors
/// without materializing a dense field.
pub(crate) fn variation_exponents(
    coeffs: &Coefficients,
    x: &SolutionPath,
    driver: &FbmPath,
) -> Result<Vec<f64>> {
    if x.grid() != driver.grid() {
        return Err(Error::GridMismatch(
            "solution and driver grids differ".into(),
        ));
    }
    let grid = x.grid();
    let dt = grid.dt();
    let mut exps = Vec::with_capacity(grid.num_nodes());
    let mut acc = 0.0;
    exps.push(acc);
    for i in 0..grid.steps() {
        let xi = x.values()[i];
        acc += coeffs.b_prime(xi) * dt + coeffs.sigma_prime(xi) * driver.increment(i);
        if !acc.is_finite() || acc.abs() > MAX_EXPONENT {
            return Err(Error::ExponentOverflow {
                step: i + 1,
                value: acc,
            });
        }
        exps.push(acc);
    }
    Ok(exps)
}

/// First-variation process `J` on the grid: `J_0 = 1`, strictly positive.
pub fn first_variation(
    coeffs: &Coefficients,
    x: &SolutionPath,
    driver: &FbmPath,
) -> Result<Vec<f64>> {
    Ok(variation_exponents(coeffs, x, driver)?
        .iter()
        .map(|e| e.exp())
        .collect())
}

/// Derivative field from the first variation:
/// `d[i][j] = sigma(X_i) J_j / J_i` for `i <= j`.
pub fn derivative_field(
    coeffs: &Coefficients,
    x: &SolutionPath,
    driver: &FbmPath,
) -> Result<DerivativeField> {
    let j = first_variation(coeffs, x, driver)?;
    let sigma: Vec<f64> = x.values().iter().map(|&v| coeffs.sigma(v)).collect();
    let inv: Vec<f64> = j.iter().map(|v| 1.0 / v).collect();
    DerivativeField::from_fn(x.grid(), |r, s| sigma[r] * j[s] * inv[r])
}

/// Closed-form derivative field of a shipped model family.
///
/// `Custom` models have no closed form and are rejected; use
/// [`derivative_field`].
pub fn derivative_field_exact(model: &ModelSpec, x: &SolutionPath) -> Result<DerivativeField> {
    let grid = x.grid();
    match model {
        ModelSpec::Fbm => DerivativeField::from_fn(grid, |_, _| 1.0),
        ModelSpec::Fou { nu } => {
            let nu = *nu;
            // Lag formed as (j - i) * dt so the exponent is cancellation-free.
            DerivativeField::from_fn(grid, |i, j| nu * (-grid.lag(j - i)).exp())
        }
        ModelSpec::Doss(m) => {
            let sigma: Vec<f64> = x.values().iter().map(|&v| m.sigma(v)).collect();
            // sigma(X_s) off the diagonal; the diagonal convention
            // sigma(X_i) coincides with it at i = j.
            DerivativeField::from_fn(grid, |_, j| sigma[j])
        }
        ModelSpec::Custom(_) => Err(Error::UnsupportedModel(
            "custom coefficients have no closed-form derivative field",
        )),
    }
}

/// Debug export: header `r_index,s_index,value`, row-major, one line per
/// entry including the zero upper part.
pub fn write_field_csv<W: Write>(out: &mut W, field: &DerivativeField) -> Result<()> {
    writeln!(out, "r_index,s_index,value")?;
    let m = field.grid().num_nodes();
    for i in 0..m {
        for j in 0..m {
            writeln!(out, "{i},{j},{:.16e}", field.value(i, j))?;
        }
    }
    Ok(())
}
