//! Monte Carlo ensemble harness and convergence diagnostics.
//!
//! Drives path sampling, SDE solving, and Tanaka term assembly across an
//! ensemble, with reductions that are bit-identical for any worker count:
//! per-path work is embarrassingly parallel and keyed by path index, and
//! every aggregate is a fixed-order pairwise sum over path order. On top of
//! the plain estimator sit three diagnostics: an L⁴ Cauchy statistic for
//! occupation integrals along the mollifier ladder, an L² contraction
//! statistic for the local-time trace, and a kernel-density check of the
//! order-zero density bound `sup p_t <= C t^{-H}`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbm::{FbmPath, FbmSampler, HurstParam, SampleMethod, TimeGrid};
use crate::mollify::MollifierIndex;
use crate::quad::KernelWeights;
use crate::sde::{solve, Coefficients, ModelSpec, SolutionPath};
use crate::tanaka::{
    mollified_identity_residual, pathwise_residual, tanaka_residual, terms_from_accumulators,
    trace_accumulators, Convention, LevelX,
};
use crate::util::pairwise_sum;

/// Plain Monte Carlo estimate; `stderr = sample std / sqrt(count)` with the
/// unbiased variance, zero when `count < 2` leaves it undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MCEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty(), "estimate needs at least one sample");
        let count = samples.len();
        let mean = pairwise_sum(samples) / count as f64;
        let stderr = if count >= 2 {
            let sq: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
            (pairwise_sum(&sq) / (count as f64 - 1.0) / count as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            count,
        }
    }
}

/// The ten per-path statistics aggregated for every `(level, n)`.
pub const TERM_NAMES: [&str; 10] = [
    "abs_increment",
    "mollified_increment",
    "drift",
    "rs_total",
    "trace_sigma_prime",
    "trace_local",
    "skorokhod",
    "residual_tchange",
    "residual_tf",
    "pathwise_residual",
];

/// Full description of one ensemble experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub h: HurstParam,
    pub grid: TimeGrid,
    pub paths: usize,
    pub seed: u64,
    pub x0: f64,
    pub levels: Vec<LevelX>,
    pub mollifier_ladder: Vec<MollifierIndex>,
    pub convention: Convention,
    pub method: SampleMethod,
    /// Retain the per-path term rows alongside the aggregates.
    pub keep_rows: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 2 {
            return Err(Error::InvalidParameter(format!(
                "ensemble needs at least 2 paths, got {}",
                self.paths
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidParameter("no levels requested".into()));
        }
        if self.mollifier_ladder.is_empty() {
            return Err(Error::InvalidParameter("empty mollifier ladder".into()));
        }
        if self
            .mollifier_ladder
            .windows(2)
            .any(|w| w[1].n() <= w[0].n())
        {
            return Err(Error::InvalidParameter(
                "mollifier ladder must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// One aggregated statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct TermEstimate {
    pub level: f64,
    pub n: u64,
    pub term: &'static str,
    pub estimate: MCEstimate,
}

/// One per-path row, mirroring the CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct TermRow {
    pub path_id: usize,
    pub x: f64,
    pub n: u64,
    pub convention: Convention,
    pub abs_increment: f64,
    pub drift: f64,
    pub rs_total: f64,
    pub trace_sigma_prime: f64,
    pub trace_local: f64,
    pub skorokhod: f64,
    pub residual_tchange: f64,
    pub residual_tf: f64,
}

/// Aggregates (and optionally raw rows) for `levels x ladder x TERM_NAMES`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub estimates: Vec<TermEstimate>,
    pub rows: Option<Vec<TermRow>>,
}

impl EnsembleResult {
    pub fn estimate(&self, level: f64, n: u64, term: &str) -> Option<&MCEstimate> {
        self.estimates
            .iter()
            .find(|e| e.level == level && e.n == n && e.term == term)
            .map(|e| &e.estimate)
    }
}

/// Samples the driver ensemble, solves the model, assembles Tanaka terms at
/// every `(level, n)`, and aggregates. Deterministic for a given config:
/// path `i` draws from counter stream `i` regardless of scheduling, and the
/// reduction order is fixed.
pub fn run_ensemble(config: &ExperimentConfig) -> Result<EnsembleResult> {
    config.validate()?;
    let coeffs = config.model.coefficients();
    let weights = KernelWeights::new(config.grid, config.h)?;
    let sampler = FbmSampler::new(config.grid, config.h, config.seed, config.method)?;
    let levels = &config.levels;
    let ladder = &config.mollifier_ladder;
    let cells = levels.len() * ladder.len();

    let per_path: Vec<Vec<[f64; 10]>> = (0..config.paths)
        .into_par_iter()
        .map(|idx| -> Result<Vec<[f64; 10]>> {
            let run = || -> Result<Vec<[f64; 10]>> {
                let b = sampler.sample_path(idx as u64);
                let x = solve(&config.model, config.x0, &b)?;
                let acc = trace_accumulators(&x, &coeffs, &b, &weights, config.convention)?;
                let last = *x.values().last().expect("non-empty path");
                let first = x.values()[0];
                let mut out = Vec::with_capacity(cells);
                for &level in levels {
                    let pres = pathwise_residual(&x, &coeffs, level, &b, None)?;
                    for &n in ladder {
                        let terms =
                            terms_from_accumulators(&x, &acc, &coeffs, level, n, &b, &weights)?;
                        let tchange = mollified_identity_residual(&terms, &x, n);
                        let tf = tanaka_residual(&terms, &x);
                        let minc = n.eval(last, level.x()).f - n.eval(first, level.x()).f;
                        out.push([
                            terms.abs_increment,
                            minc,
                            terms.drift,
                            terms.rs_total,
                            terms.trace_sigma_prime,
                            terms.trace_local,
                            terms.skorokhod,
                            tchange,
                            tf,
                            pres,
                        ]);
                    }
                }
                Ok(out)
            };
            run().map_err(|e| Error::PathFailure {
                index: idx as u64,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut estimates = Vec::with_capacity(cells * TERM_NAMES.len());
    for (li, level) in levels.iter().enumerate() {
        for (ni, n) in ladder.iter().enumerate() {
            let cell = li * ladder.len() + ni;
            for (k, term) in TERM_NAMES.iter().enumerate() {
                let column: Vec<f64> = per_path.iter().map(|rows| rows[cell][k]).collect();
                estimates.push(TermEstimate {
                    level: level.x(),
                    n: n.n(),
                    term,
                    estimate: MCEstimate::from_samples(&column),
                });
            }
        }
    }

    let rows = config.keep_rows.then(|| {
        let mut rows = Vec::with_capacity(config.paths * cells);
        for (path_id, path_rows) in per_path.iter().enumerate() {
            for (li, level) in levels.iter().enumerate() {
                for (ni, n) in ladder.iter().enumerate() {
                    let v = &path_rows[li * ladder.len() + ni];
                    rows.push(TermRow {
                        path_id,
                        x: level.x(),
                        n: n.n(),
                        convention: config.convention,
                        abs_increment: v[0],
                        drift: v[2],
                        rs_total: v[3],
                        trace_sigma_prime: v[4],
                        trace_local: v[5],
                        skorokhod: v[6],
                        residual_tchange: v[7],
                        residual_tf: v[8],
                    });
                }
            }
        }
        rows
    });

    Ok(EnsembleResult { estimates, rows })
}

/// Monte Carlo estimate of
/// `max_t E[(int_0^t f''_n(X - x) ds - int_0^t f''_m(X - x) ds)^4]`
/// over the probe times, occupation integrals by left-point sums. Symmetric
/// in `(n, m)` and exactly zero at `n = m`.
pub fn cauchy_l4_diagnostic(
    x_paths: &[SolutionPath],
    n: MollifierIndex,
    m: MollifierIndex,
    level: LevelX,
    times: &[f64],
) -> Result<MCEstimate> {
    if x_paths.is_empty() || times.is_empty() {
        return Err(Error::InvalidParameter(
            "diagnostic needs paths and probe times".into(),
        ));
    }
    let grid = x_paths[0].grid();
    let dt = grid.dt();
    let cuts: Vec<usize> = times
        .iter()
        .map(|&t| {
            let k = (t / dt).round() as usize;
            if k == 0 || k > grid.steps() {
                return Err(Error::InvalidParameter(format!(
                    "probe time {t} outside the grid"
                )));
            }
            Ok(k)
        })
        .collect::<Result<_>>()?;

    let per_path: Vec<Vec<f64>> = x_paths
        .par_iter()
        .map(|x| -> Result<Vec<f64>> {
            if x.grid() != grid {
                return Err(Error::GridMismatch("mixed grids in the ensemble".into()));
            }
            let occ = |idx: MollifierIndex, k: usize| -> f64 {
                let cells: Vec<f64> = x.values()[..k]
                    .iter()
                    .map(|&v| idx.eval(v, level.x()).f_second * dt)
                    .collect();
                pairwise_sum(&cells)
            };
            Ok(cuts
                .iter()
                .map(|&k| {
                    let d = occ(n, k) - occ(m, k);
                    d * d * d * d
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let best = (0..cuts.len())
        .map(|ti| {
            let column: Vec<f64> = per_path.iter().map(|row| row[ti]).collect();
            MCEstimate::from_samples(&column)
        })
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .expect("non-empty probe list");
    Ok(best)
}

/// `E[(T_n - T_m)^2]` for consecutive ladder pairs, where `T_n` is the
/// local-time trace at mollifier index `n`. One estimate per pair.
#[allow(clippy::too_many_arguments)]
pub fn l2_trace_convergence(
    x_paths: &[SolutionPath],
    drivers: &[FbmPath],
    coeffs: &Coefficients,
    level: LevelX,
    ladder: &[MollifierIndex],
    weights: &KernelWeights,
    convention: Convention,
) -> Result<Vec<MCEstimate>> {
    if x_paths.len() != drivers.len() || x_paths.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} solution paths vs {} drivers",
            x_paths.len(),
            drivers.len()
        )));
    }
    if ladder.len() < 2 {
        return Err(Error::InvalidParameter(
            "ladder needs at least two indices".into(),
        ));
    }
    let per_path: Vec<Vec<f64>> = x_paths
        .par_iter()
        .zip(drivers.par_iter())
        .map(|(x, b)| -> Result<Vec<f64>> {
            let acc = trace_accumulators(x, coeffs, b, weights, convention)?;
            let traces: Vec<f64> = ladder
                .iter()
                .map(|&n| {
                    terms_from_accumulators(x, &acc, coeffs, level, n, b, weights)
                        .map(|t| t.trace_local)
                })
                .collect::<Result<_>>()?;
            Ok(traces
                .windows(2)
                .map(|w| (w[0] - w[1]) * (w[0] - w[1]))
                .collect())
        })
        .collect::<Result<_>>()?;

    Ok((0..ladder.len() - 1)
        .map(|pi| {
            let column: Vec<f64> = per_path.iter().map(|row| row[pi]).collect();
            MCEstimate::from_samples(&column)
        })
        .collect())
}

/// Frozen constant of the order-zero density bound `sup p_t <= C t^{-H}`,
/// calibrated once on the exact fBm density (`sup = t^{-H}/sqrt(2 pi)
/// ~ 0.399 t^{-H}`) with headroom for kernel-estimate noise.
pub const DENSITY_BOUND_CONSTANT: f64 = 0.45;

/// Kernel density diagnostic of one time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub count: usize,
    /// All samples equal; no density estimate is possible.
    pub degenerate: bool,
    pub bandwidth: f64,
    pub sup_kde: f64,
    pub peak_x: f64,
    /// Least-squares slope of `-log p` against `x^2` over the tails;
    /// positive means sub-Gaussian-or-steeper decay.
    pub tail_slope: f64,
    pub bound_constant: f64,
    pub bound_value: f64,
    pub bound_satisfied: bool,
    /// `(x, kde(x))` pairs for export.
    pub grid: Vec<(f64, f64)>,
}

/// Silverman-bandwidth KDE of the time-`t` marginal with the order-zero
/// bound check and a Gaussian-tail fit. Needs at least 1024 samples.
pub fn density_diagnostic(samples: &[f64], t: f64, h: HurstParam) -> Result<DensityReport> {
    if samples.len() < 1024 {
        return Err(Error::InvalidParameter(format!(
            "density diagnostic needs >= 1024 samples, got {}",
            samples.len()
        )));
    }
    if t.is_nan() || t <= 0.0 {
        return Err(Error::NegativeTime(t));
    }
    let count = samples.len();
    let bound_value = DENSITY_BOUND_CONSTANT * t.powf(-h.value());

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = pairwise_sum(&sorted) / count as f64;
    let sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    let std = (pairwise_sum(&sq) / (count as f64 - 1.0)).sqrt();
    let q = |p: f64| sorted[((count - 1) as f64 * p).round() as usize];
    let iqr = q(0.75) - q(0.25);
    let spread = std.min(iqr / 1.34);
    let bandwidth = 0.9 * spread * (count as f64).powf(-0.2);
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return Ok(DensityReport {
            count,
            degenerate: true,
            bandwidth: 0.0,
            sup_kde: 0.0,
            peak_x: sorted[0],
            tail_slope: 0.0,
            bound_constant: DENSITY_BOUND_CONSTANT,
            bound_value,
            bound_satisfied: false,
            grid: Vec::new(),
        });
    }

    let lo = sorted[0] - 3.0 * bandwidth;
    let hi = sorted[count - 1] + 3.0 * bandwidth;
    let points = 401;
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / ((count as f64) * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<(f64, f64)> = (0..points)
        .map(|i| {
            let x = lo + step * i as f64;
            let terms: Vec<f64> = sorted
                .iter()
                .map(|&v| {
                    let u = (x - v) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .collect();
            (x, norm * pairwise_sum(&terms))
        })
        .collect();
    let &(peak_x, sup_kde) = grid
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty KDE grid");

    // Tail fit of -log p against x^2 where the estimate is resolvable.
    let center = q(0.5);
    let floor = sup_kde * 1e-12;
    let tail: Vec<(f64, f64)> = grid
        .iter()
        .filter(|(x, p)| (x - center).abs() >= 1.5 * std && *p > floor)
        .map(|&(x, p)| (x * x, -p.ln()))
        .collect();
    let tail_slope = if tail.len() >= 8 {
        let nf = tail.len() as f64;
        let sx: f64 = tail.iter().map(|p| p.0).sum();
        let sy: f64 = tail.iter().map(|p| p.1).sum();
        let sxx: f64 = tail.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = tail.iter().map(|p| p.0 * p.1).sum();
        (nf * sxy - sx * sy) / (nf * sxx - sx * sx)
    } else {
        f64::NAN
    };

    Ok(DensityReport {
        count,
        degenerate: false,
        bandwidth,
        sup_kde,
        peak_x,
        tail_slope,
        bound_constant: DENSITY_BOUND_CONSTANT,
        bound_value,
        bound_satisfied: sup_kde <= bound_value,
        grid,
    })
}

/// Per-path rows: `path_id,x,n,convention,abs_increment,drift,rs_total,`
/// `trace_sigma_prime,trace_local,skorokhod,residual_tchange,residual_tf`.
pub fn write_rows_csv<W: Write>(out: &mut W, rows: &[TermRow]) -> Result<()> {
    writeln!(
        out,
        "path_id,x,n,convention,abs_increment,drift,rs_total,trace_sigma_prime,\
         trace_local,skorokhod,residual_tchange,residual_tf"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.path_id,
            r.x,
            r.n,
            r.convention,
            r.abs_increment,
            r.drift,
            r.rs_total,
            r.trace_sigma_prime,
            r.trace_local,
            r.skorokhod,
            r.residual_tchange,
            r.residual_tf
        )?;
    }
    Ok(())
}

/// Aggregates: `level,n,term,mean,stderr,count`.
pub fn write_ensemble_csv<W: Write>(out: &mut W, result: &EnsembleResult) -> Result<()> {
    writeln!(out, "level,n,term,mean,stderr,count")?;
    for e in &result.estimates {
        writeln!(
            out,
            "{:.16e},{},{},{:.16e},{:.16e},{}",
            e.level, e.n, e.term, e.estimate.mean, e.estimate.stderr, e.estimate.count
        )?;
    }
    Ok(())
}

/// KDE export: `x,kde`.
pub fn write_density_csv<W: Write>(out: &mut W, report: &DensityReport) -> Result<()> {
    writeln!(out, "x,kde")?;
    for &(x, p) in &report.grid {
        writeln!(out, "{x:.16e},{p:.16e}")?;
    }
    Ok(())
}
