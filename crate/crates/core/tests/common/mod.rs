//! Shared helpers for the integration suites: closed-form oracles computed
//! independently of the library internals, small statistics utilities, and a
//! runner for the installed binary.

#![allow(dead_code)]

use std::process::{Command, Output};

/// Recursive adaptive Simpson quadrature on `[a, b]`.
///
/// Kept separate from the library so the oracle values below do not depend
/// on the code under test.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
                + rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a), f(b), f(m));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 40)
}

/// `E|B_t| = sqrt(2/pi) t^H`, the folded-normal limit of the weighted local
/// time and of the local-time trace for fBm at level zero.
pub fn folded_limit(h: f64, t: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * t.powf(h)
}

/// Mollified trace expectation for fBm at level zero, argument-at-`s`
/// convention. With the Gaussian kernel of variance `eps = 1/n`,
///
/// ```text
/// E[T_n] = 2H int_0^t s^{2H-1} E[f''_n(B_s)] / 2 ... = sqrt(2/pi)
///          (sqrt(t^{2H} + eps) - sqrt(eps)),
/// ```
///
/// by the substitution `y = s^{2H}` (`E[f''_n(B_s)] = 2 rho_{eps + s^{2H}}(0)`).
pub fn ats_trace_oracle(h: f64, t: f64, n: u64) -> f64 {
    let eps = 1.0 / n as f64;
    (2.0 / std::f64::consts::PI).sqrt() * ((t.powf(2.0 * h) + eps).sqrt() - eps.sqrt())
}

/// Mollified trace expectation for fBm at level zero on `[0, 1]`,
/// argument-at-`r` convention:
///
/// ```text
/// E[T_n] = 2H int_0^1 (1-r)^{2H-1} / sqrt(2 pi (eps + r^{2H})) dr,
/// ```
///
/// evaluated by adaptive quadrature. No closed form: the time weight
/// `(1-r)^{2H-1}` pairs with the density at `r` instead of telescoping.
pub fn atr_trace_oracle(h: f64, n: u64) -> f64 {
    let eps = 1.0 / n as f64;
    let two_h = 2.0 * h;
    let f = move |r: f64| {
        (1.0 - r).powf(two_h - 1.0) / (2.0 * std::f64::consts::PI * (eps + r.powf(two_h))).sqrt()
    };
    two_h * adaptive_simpson(&f, 0.0, 1.0, 1e-12)
}

/// Mean of a sample.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median of a sample.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-comparable sample"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the `k` sub-ensemble means, the sub-ensembles being contiguous
/// path-index ranges. Robust location estimate for heavy-tailed fourth
/// moments; deterministic because the split ignores scheduling.
pub fn median_of_means(samples: &[f64], k: usize) -> f64 {
    assert!(k >= 1 && samples.len() >= k, "need at least {k} samples");
    let chunk = samples.len() / k;
    let means: Vec<f64> = (0..k)
        .map(|i| {
            let lo = i * chunk;
            let hi = if i + 1 == k {
                samples.len()
            } else {
                lo + chunk
            };
            mean(&samples[lo..hi])
        })
        .collect();
    median(&means)
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// One verdict line per acceptance criterion. Run the suite with
/// `cargo test --test acceptance -- --nocapture` to see the lines for
/// passing criteria as well.
pub fn report(name: &str, pass: bool, detail: &str) {
    println!("{name}: {} [{detail}]", if pass { "PASS" } else { "FAIL" });
}

/// Runs the workspace binary with the given arguments and environment
/// overrides, capturing output.
pub fn run_bin(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fbm-tanaka"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should spawn")
}
