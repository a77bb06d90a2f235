//! Gaussian mollification of the absolute value.
//!
//! The family is indexed by `n >= 1` with bandwidth `eps = 1/n`:
//!
//! ```text
//! rho_eps(u)   = exp(-u^2 / (2 eps)) / sqrt(2 pi eps)
//! f'_n(u)      = 2 int_{-inf}^{u} rho_eps - 1 = erf(u sqrt(n/2))
//! f''_n(u)     = 2 rho_eps(u)
//! f_n(u)       = u f'_n(u) + (2/n)(rho_eps(u) - rho_eps(0))
//! ```
//!
//! `f_n` is the smooth convex approximation of `|u|` with `f_n(0) = 0` and
//! uniform error `0 <= |u| - f_n(u) <= sqrt(2/(pi n))`; `f'_n` approximates
//! `sgn(u)`. Everything is entire, so evaluation never fails.

use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Mollifier index `n >= 1`; the Gaussian bandwidth is `eps = 1/n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MollifierIndex {
    n: u64,
}

impl MollifierIndex {
    pub fn new(n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "mollifier index must be >= 1".into(),
            ));
        }
        Ok(Self { n })
    }

    pub fn n(self) -> u64 {
        self.n
    }

    /// Bandwidth `eps = 1/n`.
    pub fn epsilon(self) -> f64 {
        1.0 / self.n as f64
    }

    /// Evaluates `(f_n, f'_n, f''_n)` at the shifted argument `z - x`.
    pub fn eval(self, z: f64, x: f64) -> MollifierValues {
        mollifier_eval(self, z, x)
    }
}

/// Value triple of the mollified absolute value and its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifierValues {
    pub f: f64,
    pub f_prime: f64,
    pub f_second: f64,
}

/// Evaluates the mollifier family at level `x`: all three functions take the
/// argument `u = z - x`.
///
/// `f` uses the closed form `u f'_n(u) + (2/n)(rho(u) - rho(0))`, which
/// differentiates back to `f'_n` and vanishes at `u = 0`; no quadrature runs
/// inside sampling loops.
pub fn mollifier_eval(n: MollifierIndex, z: f64, x: f64) -> MollifierValues {
    let u = z - x;
    let nf = n.n() as f64;
    let f_prime = erf(u * (0.5 * nf).sqrt());
    // rho_{1/n}(u) = sqrt(n / (2 pi)) exp(-n u^2 / 2).
    let gauss = (-0.5 * nf * u * u).exp();
    let rho_scale = (nf / std::f64::consts::TAU).sqrt();
    let f_second = 2.0 * rho_scale * gauss;
    let f = u * f_prime + (2.0 / nf) * rho_scale * (gauss - 1.0);
    MollifierValues {
        f,
        f_prime,
        f_second,
    }
}

/// Sign function with the convention `sgn(0) = 0`.
///
/// The value at a single point never affects the integrals this crate
/// computes; fixing it makes tests deterministic.
pub fn sgn(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform mollification error bound `sup_u (|u| - f_n(u)) = sqrt(2/(pi n))`.
pub fn mollification_error_bound(n: MollifierIndex) -> f64 {
    (2.0 / (std::f64::consts::PI * n.n() as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::adaptive_simpson;
    use approx::assert_relative_eq;

    fn idx(n: u64) -> MollifierIndex {
        MollifierIndex::new(n).unwrap()
    }

    #[test]
    fn rejects_zero_index() {
        assert!(MollifierIndex::new(0).is_err());
        assert_eq!(idx(4).epsilon(), 0.25);
    }

    #[test]
    fn center_values_at_n_one() {
        let v = mollifier_eval(idx(1), 0.7, 0.7);
        assert_eq!(v.f, 0.0);
        assert_eq!(v.f_prime, 0.0);
        // f''(0) = 2 rho_1(0) = 2 / sqrt(2 pi).
        assert_relative_eq!(
            v.f_second,
            2.0 / std::f64::consts::TAU.sqrt(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn large_n_recovers_absolute_value_and_sign() {
        let v = mollifier_eval(idx(1_000_000), 1.0, 0.0);
        assert!((v.f_prime - 1.0).abs() < 1e-12);
        // |f - 1| sits at the uniform bound sqrt(2/(pi n)) ~ 8e-4: the gap
        // |u| - f_n(u) increases to the bound as |u| grows, and u = 1 is far
        // in the tail at this n.
        let bound = mollification_error_bound(idx(1_000_000));
        assert!((v.f - 1.0).abs() <= bound + 1e-15);
    }

    #[test]
    fn closed_form_matches_quadrature_of_defining_integral() {
        // f_n(z) = int_0^z f'_n(u) du, n = 4, z = 0.3.
        let n = idx(4);
        let quad = adaptive_simpson(&|u: f64| mollifier_eval(n, u, 0.0).f_prime, 0.0, 0.3, 1e-13);
        let v = mollifier_eval(n, 0.3, 0.0);
        assert!(
            (v.f - quad).abs() < 1e-10,
            "closed form {} vs integral {quad}",
            v.f
        );
    }

    #[test]
    fn f_second_is_a_density_of_mass_two() {
        for &n in &[1u64, 16] {
            let m = idx(n);
            let half_width = 10.0 / (n as f64).sqrt();
            let mass = adaptive_simpson(
                &|u: f64| mollifier_eval(m, u, 0.0).f_second,
                -half_width,
                half_width,
                1e-12,
            );
            assert!((mass - 2.0).abs() < 1e-8, "mass {mass} for n = {n}");
            assert!(mollifier_eval(m, -3.0, 0.0).f_second >= 0.0);
        }
    }

    #[test]
    fn f_prime_is_odd_increasing_and_bounded() {
        let n = idx(16);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=400 {
            let u = -2.0 + i as f64 * 0.01;
            let v = mollifier_eval(n, u, 0.0);
            assert!(v.f_prime > prev, "not strictly increasing at u = {u}");
            assert!(v.f_prime.abs() < 1.0);
            let w = mollifier_eval(n, -u, 0.0);
            assert_relative_eq!(v.f_prime, -w.f_prime, epsilon = 1e-15);
            prev = v.f_prime;
        }
    }

    #[test]
    fn uniform_mollification_bound_holds() {
        for &n in &[1u64, 4, 16, 64] {
            let m = idx(n);
            let bound = mollification_error_bound(m);
            for i in 0..=2000 {
                let u = -5.0 + i as f64 * 0.005;
                let gap = u.abs() - mollifier_eval(m, u, 0.0).f;
                assert!(
                    (-1e-12..=bound + 1e-12).contains(&gap),
                    "gap {gap} outside [0, {bound}] at u = {u}, n = {n}"
                );
            }
        }
    }

    #[test]
    fn f_is_convex_in_z() {
        let n = idx(4);
        let x = 0.2;
        let h = 0.01;
        for i in 0..=800 {
            let z = -4.0 + i as f64 * h;
            let second_diff = mollifier_eval(n, z + h, x).f - 2.0 * mollifier_eval(n, z, x).f
                + mollifier_eval(n, z - h, x).f;
            assert!(
                second_diff >= -1e-12,
                "second difference {second_diff} at z = {z}"
            );
        }
    }

    #[test]
    fn pointwise_convergence_to_limit_objects() {
        // At fixed u != 0 the family converges to sgn / absolute value.
        let coarse = mollifier_eval(idx(4), 0.1, 0.0);
        let fine = mollifier_eval(idx(256), 0.1, 0.0);
        assert!((fine.f_prime - 1.0).abs() < (coarse.f_prime - 1.0).abs());
        assert!((fine.f - 0.1).abs() < (coarse.f - 0.1).abs());
    }

    #[test]
    fn sgn_convention() {
        assert_eq!(sgn(3.5), 1.0);
        assert_eq!(sgn(-0.2), -1.0);
        assert_eq!(sgn(0.0), 0.0);
    }
}
