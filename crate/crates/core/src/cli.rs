//! Command-line front end for the `fbm-tanaka` binary.
//!
//! Six subcommands drive the library end to end:
//!
//! * `sample`   — draw fBm paths and dump the leading ones as CSV.
//! * `solve`    — solve the model along each driver and dump paths.
//! * `tanaka`   — assemble decomposition terms per path, aggregate, and
//!   compare against closed-form oracles where they exist.
//! * `pathwise` — per-path residuals of the sign-integrand identity.
//! * `converge` — term statistics along the mollifier ladder plus the
//!   L² differences between consecutive trace terms.
//! * `density`  — kernel density diagnostic of the time-`t` marginal.
//!
//! Options come from `--key value` flags and, optionally, a `--config FILE`
//! of line-oriented `key = value` pairs (`#` starts a comment); flags
//! override file values. Unknown keys are rejected by name. Exit codes:
//! `0` success, `1` numerical failure, `2` usage error.
//!
//! All numeric output is formatted with `.` as the decimal separator and a
//! fixed number of digits, so identical configurations produce byte-identical
//! files at any worker count (`RAYON_NUM_THREADS` changes speed, not bytes).

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::fbm::{FbmSampler, HurstParam, SampleMethod, TimeGrid};
use crate::mc::{
    density_diagnostic, l2_trace_convergence, run_ensemble, write_density_csv, write_ensemble_csv,
    write_rows_csv, EnsembleResult, ExperimentConfig, MCEstimate,
};
use crate::mollify::MollifierIndex;
use crate::quad::KernelWeights;
use crate::sde::{solve, DossModel, ModelSpec, SolutionPath};
use crate::tanaka::{mollified_residual_direct, pathwise_residual, Convention, LevelX};

/// Maximum number of full paths dumped by `sample`/`solve`; summaries always
/// aggregate every path.
const MAX_PATH_DUMP: usize = 16;

const USAGE: &str = "\
usage: fbm-tanaka <subcommand> [--key value]...

subcommands:
  sample    draw fBm paths; writes paths.csv (first 16 paths) + summary.txt
  solve     solve the model per path; writes paths.csv + summary.txt
  tanaka    decomposition terms; writes terms.csv, ensemble.csv, summary.txt
  pathwise  sign-integrand residuals; writes pathwise.csv + summary.txt
  converge  mollifier-ladder statistics; writes converge.csv + summary.txt
  density   marginal density diagnostic; writes density.csv + summary.txt

options (flag | config-file key; flags win):
  --config FILE        read `key = value` lines (# comments) before flags
  --out DIR            output directory (default out)
  --model NAME         fbm | fou | doss (default fbm)
  --hurst H            Hurst parameter in (1/2, 1) (default 0.75)
  --horizon T          time horizon > 0 (default 1)
  --grid-n N           number of grid steps (default 2048)
  --paths K            ensemble size (default 4096)
  --seed S             RNG seed (default 42)
  --level X            level x of |X_t - x| (default 0)
  --mollifier-n N      single mollifier index; overrides the ladder
  --ladder A,B,...     strictly increasing indices (default 4,16,64,256)
  --convention C       argument_at_s | argument_at_r (default argument_at_s)
  --x0 V               initial condition (default 0)
  --nu V               fOU volatility (default 1)
  --time T             probe time for density (default horizon)

environment:
  RAYON_NUM_THREADS    worker count; affects wall-clock time only
";

/// Which experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Sample,
    Solve,
    Tanaka,
    Pathwise,
    Converge,
    Density,
}

impl Subcommand {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sample" => Self::Sample,
            "solve" => Self::Solve,
            "tanaka" => Self::Tanaka,
            "pathwise" => Self::Pathwise,
            "converge" => Self::Converge,
            "density" => Self::Density,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::Sample => "sample",
            Self::Solve => "solve",
            Self::Tanaka => "tanaka",
            Self::Pathwise => "pathwise",
            Self::Converge => "converge",
            Self::Density => "density",
        }
    }
}

/// A usage problem; maps to exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Fully resolved invocation.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub subcommand: Subcommand,
    pub out_dir: PathBuf,
    pub model: ModelSpec,
    pub h: HurstParam,
    pub horizon: f64,
    pub grid_n: usize,
    pub paths: usize,
    pub seed: u64,
    pub level: f64,
    pub ladder: Vec<u64>,
    pub convention: Convention,
    pub x0: f64,
    pub time: f64,
}

/// Raw key/value settings prior to validation; `None` means "use default".
#[derive(Debug, Default)]
struct Settings {
    out: Option<String>,
    model: Option<String>,
    hurst: Option<f64>,
    horizon: Option<f64>,
    grid_n: Option<usize>,
    paths: Option<usize>,
    seed: Option<u64>,
    level: Option<f64>,
    mollifier_n: Option<u64>,
    ladder: Option<Vec<u64>>,
    convention: Option<Convention>,
    x0: Option<f64>,
    nu: Option<f64>,
    time: Option<f64>,
}

fn bad_value(key: &str, value: &str) -> UsageError {
    UsageError(format!("invalid value for `{key}`: `{value}`"))
}

impl Settings {
    /// Applies one `key = value` pair; unknown keys are rejected by name.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), UsageError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, UsageError> {
            value.trim().parse().map_err(|_| bad_value(key, value))
        }
        match key {
            "out" => self.out = Some(value.trim().to_string()),
            "model" => {
                let v = value.trim();
                if !matches!(v, "fbm" | "fou" | "doss") {
                    return Err(UsageError(format!(
                        "invalid value for `model`: `{v}` (expected fbm, fou, or doss)"
                    )));
                }
                self.model = Some(v.to_string());
            }
            "hurst" => {
                let h: f64 = num(key, value)?;
                if !(h > 0.5 && h < 1.0) {
                    return Err(UsageError(format!(
                        "invalid value for `hurst`: {h} is outside the open interval (1/2, 1)"
                    )));
                }
                self.hurst = Some(h);
            }
            "horizon" => {
                let t: f64 = num(key, value)?;
                if !(t > 0.0 && t.is_finite()) {
                    return Err(bad_value(key, value));
                }
                self.horizon = Some(t);
            }
            "grid-n" => {
                let n: usize = num(key, value)?;
                if n == 0 {
                    return Err(bad_value(key, value));
                }
                self.grid_n = Some(n);
            }
            "paths" => {
                let p: usize = num(key, value)?;
                if p == 0 {
                    return Err(bad_value(key, value));
                }
                self.paths = Some(p);
            }
            "seed" => self.seed = Some(num(key, value)?),
            "level" => {
                let x: f64 = num(key, value)?;
                if !x.is_finite() {
                    return Err(bad_value(key, value));
                }
                self.level = Some(x);
            }
            "mollifier-n" => {
                let n: u64 = num(key, value)?;
                if n == 0 {
                    return Err(bad_value(key, value));
                }
                self.mollifier_n = Some(n);
            }
            "ladder" => {
                let ns: Vec<u64> = value
                    .split(',')
                    .map(|part| num("ladder", part.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                if ns.is_empty() || ns.contains(&0) || ns.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(UsageError(format!(
                        "invalid value for `ladder`: `{value}` (need strictly increasing \
                         positive indices)"
                    )));
                }
                self.ladder = Some(ns);
            }
            "convention" => {
                self.convention = Some(value.trim().parse().map_err(|_| {
                    UsageError(format!(
                        "invalid value for `convention`: `{value}` (expected argument_at_s \
                         or argument_at_r)"
                    ))
                })?);
            }
            "x0" => {
                let x: f64 = num(key, value)?;
                if !x.is_finite() {
                    return Err(bad_value(key, value));
                }
                self.x0 = Some(x);
            }
            "nu" => {
                let v: f64 = num(key, value)?;
                if !v.is_finite() {
                    return Err(bad_value(key, value));
                }
                self.nu = Some(v);
            }
            "time" => {
                let t: f64 = num(key, value)?;
                if !(t > 0.0 && t.is_finite()) {
                    return Err(bad_value(key, value));
                }
                self.time = Some(t);
            }
            other => return Err(UsageError(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// Splits argv (after the subcommand) into `(key, value)` pairs; accepts
/// `--key value` and `--key=value`.
fn flag_pairs(args: &[String]) -> std::result::Result<Vec<(String, String)>, UsageError> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            return Err(UsageError(format!(
                "unexpected argument `{arg}` (options are `--key value`)"
            )));
        };
        if let Some((key, value)) = name.split_once('=') {
            pairs.push((key.to_string(), value.to_string()));
        } else {
            let value = it
                .next()
                .ok_or_else(|| UsageError(format!("missing value for `--{name}`")))?;
            pairs.push((name.to_string(), value.clone()));
        }
    }
    Ok(pairs)
}

/// Applies the lines of a config file to `settings`; `#` starts a comment.
fn apply_config_text(text: &str, settings: &mut Settings) -> std::result::Result<(), UsageError> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(UsageError(format!(
                "config line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        settings.set(key.trim(), value.trim())?;
    }
    Ok(())
}

/// Parses a full argv (subcommand first) into a validated [`CliConfig`].
/// A `--config FILE` is read first; remaining flags override its values.
pub fn parse_config(argv: &[String]) -> std::result::Result<CliConfig, UsageError> {
    let Some(sub) = argv.first() else {
        return Err(UsageError("missing subcommand".into()));
    };
    let subcommand =
        Subcommand::parse(sub).ok_or_else(|| UsageError(format!("unknown subcommand `{sub}`")))?;

    let mut pairs = flag_pairs(&argv[1..])?;
    let mut settings = Settings::default();
    if let Some(pos) = pairs.iter().rposition(|(k, _)| k == "config") {
        let path = pairs[pos].1.clone();
        pairs.retain(|(k, _)| k != "config");
        let text = fs::read_to_string(&path)
            .map_err(|e| UsageError(format!("cannot read config file `{path}`: {e}")))?;
        apply_config_text(&text, &mut settings)?;
    }
    for (key, value) in &pairs {
        settings.set(key, value)?;
    }

    let h =
        HurstParam::new(settings.hurst.unwrap_or(0.75)).map_err(|e| UsageError(e.to_string()))?;
    let horizon = settings.horizon.unwrap_or(1.0);
    let time = settings.time.unwrap_or(horizon);
    if time > horizon {
        return Err(UsageError(format!(
            "invalid value for `time`: {time} exceeds the horizon {horizon}"
        )));
    }
    let nu = settings.nu.unwrap_or(1.0);
    let model = match settings.model.as_deref().unwrap_or("fbm") {
        "fbm" => ModelSpec::Fbm,
        "fou" => ModelSpec::Fou { nu },
        "doss" => ModelSpec::Doss(DossModel::sine()),
        _ => unreachable!("gated in Settings::set"),
    };
    let ladder = match settings.mollifier_n {
        Some(n) => vec![n],
        None => settings.ladder.unwrap_or_else(|| vec![4, 16, 64, 256]),
    };
    Ok(CliConfig {
        subcommand,
        out_dir: PathBuf::from(settings.out.unwrap_or_else(|| "out".into())),
        model,
        h,
        horizon,
        grid_n: settings.grid_n.unwrap_or(2048),
        paths: settings.paths.unwrap_or(4096),
        seed: settings.seed.unwrap_or(42),
        level: settings.level.unwrap_or(0.0),
        ladder,
        convention: settings.convention.unwrap_or_default(),
        x0: settings.x0.unwrap_or(0.0),
        time,
    })
}

/// Entry point used by the binary: parse, run, translate errors to exit
/// codes (0 success / 1 numerical / 2 usage).
pub fn run_main(args: &[String]) -> i32 {
    if args.is_empty() {
        eprint!("{USAGE}");
        return 2;
    }
    if args[0] == "--help" || args[0] == "-h" {
        print!("{USAGE}");
        return 0;
    }
    match parse_config(args) {
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("run `fbm-tanaka --help` for usage");
            2
        }
        Ok(config) => match run(&config) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
    }
}

/// Executes one subcommand, writing its artifacts into `config.out_dir`.
pub fn run(config: &CliConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir)?;
    match config.subcommand {
        Subcommand::Sample => run_sample(config),
        Subcommand::Solve => run_solve(config),
        Subcommand::Tanaka => run_tanaka(config),
        Subcommand::Pathwise => run_pathwise(config),
        Subcommand::Converge => run_converge(config),
        Subcommand::Density => run_density(config),
    }
}

fn grid_of(config: &CliConfig) -> Result<TimeGrid> {
    TimeGrid::new(config.horizon, config.grid_n)
}

fn sampler_of(config: &CliConfig) -> Result<FbmSampler> {
    FbmSampler::new(
        grid_of(config)?,
        config.h,
        config.seed,
        SampleMethod::default(),
    )
}

fn solutions_of(config: &CliConfig) -> Result<(Vec<crate::fbm::FbmPath>, Vec<SolutionPath>)> {
    let sampler = sampler_of(config)?;
    let drivers: Vec<_> = (0..config.paths as u64)
        .map(|i| sampler.sample_path(i))
        .collect();
    let solutions = drivers
        .iter()
        .map(|b| solve(&config.model, config.x0, b))
        .collect::<Result<_>>()?;
    Ok((drivers, solutions))
}

fn config_echo(config: &CliConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("subcommand = {}\n", config.subcommand.name()));
    s.push_str(&format!("model = {}\n", config.model.name()));
    s.push_str(&format!("hurst = {}\n", config.h.value()));
    s.push_str(&format!("horizon = {}\n", config.horizon));
    s.push_str(&format!("grid_n = {}\n", config.grid_n));
    s.push_str(&format!("paths = {}\n", config.paths));
    s.push_str(&format!("seed = {}\n", config.seed));
    s.push_str(&format!("level = {}\n", config.level));
    s.push_str(&format!(
        "ladder = {}\n",
        config
            .ladder
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    s.push_str(&format!("convention = {}\n", config.convention));
    s.push_str(&format!("x0 = {}\n", config.x0));
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let e = MCEstimate::from_samples(values);
    (e.mean, e.stderr * (e.count as f64).sqrt())
}

fn run_sample(config: &CliConfig) -> Result<()> {
    let sampler = sampler_of(config)?;
    let grid = grid_of(config)?;
    let mut terminal = Vec::with_capacity(config.paths);
    let file = fs::File::create(config.out_dir.join("paths.csv"))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "path_id,t,b")?;
    for i in 0..config.paths {
        let path = sampler.sample_path(i as u64);
        if i < MAX_PATH_DUMP {
            for (k, &v) in path.values().iter().enumerate() {
                writeln!(out, "{i},{:.16e},{v:.16e}", k as f64 * grid.dt())?;
            }
        }
        terminal.push(*path.values().last().expect("non-empty path"));
    }
    out.flush()?;
    let (mean, std) = mean_std(&terminal);
    let expected_std = config.horizon.powf(config.h.value());
    let summary = format!(
        "{}\npaths.csv keeps the first {} paths; statistics cover all paths.\n\n\
         terminal value B_T over {} paths:\n  mean = {mean:.6}\n  std = {std:.6}\n  \
         exact std T^H = {expected_std:.6}\n",
        config_echo(config),
        MAX_PATH_DUMP.min(config.paths),
        config.paths,
    );
    write_text(&config.out_dir.join("summary.txt"), &summary)
}

fn run_solve(config: &CliConfig) -> Result<()> {
    let grid = grid_of(config)?;
    let (drivers, solutions) = solutions_of(config)?;
    let file = fs::File::create(config.out_dir.join("paths.csv"))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "path_id,t,b,x")?;
    for (i, (b, x)) in drivers
        .iter()
        .zip(&solutions)
        .take(MAX_PATH_DUMP)
        .enumerate()
    {
        for (k, (&bv, &xv)) in b.values().iter().zip(x.values()).enumerate() {
            writeln!(out, "{i},{:.16e},{bv:.16e},{xv:.16e}", k as f64 * grid.dt())?;
        }
    }
    out.flush()?;
    let terminal: Vec<f64> = solutions
        .iter()
        .map(|x| *x.values().last().expect("non-empty path"))
        .collect();
    let (mean, std) = mean_std(&terminal);
    let summary = format!(
        "{}\npaths.csv keeps the first {} paths; statistics cover all paths.\n\n\
         terminal value X_T over {} paths:\n  mean = {mean:.6}\n  std = {std:.6}\n",
        config_echo(config),
        MAX_PATH_DUMP.min(config.paths),
        config.paths,
    );
    write_text(&config.out_dir.join("summary.txt"), &summary)
}

fn experiment_of(config: &CliConfig, keep_rows: bool) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        model: config.model.clone(),
        h: config.h,
        grid: grid_of(config)?,
        paths: config.paths,
        seed: config.seed,
        x0: config.x0,
        levels: vec![LevelX::new(config.level)?],
        mollifier_ladder: config
            .ladder
            .iter()
            .map(|&n| MollifierIndex::new(n))
            .collect::<Result<_>>()?,
        convention: config.convention,
        method: SampleMethod::default(),
        keep_rows,
    })
}

/// Closed-form `E[trace_local(n)]` for the driver itself at level 0:
/// `sqrt(2/pi) (sqrt(T^{2H} + 1/n) - sqrt(1/n))`.
fn fbm_trace_oracle(h: f64, horizon: f64, n: u64) -> f64 {
    let eps = 1.0 / n as f64;
    (2.0 / std::f64::consts::PI).sqrt() * ((horizon.powf(2.0 * h) + eps).sqrt() - eps.sqrt())
}

fn estimate_line(label: &str, e: &MCEstimate) -> String {
    format!("  {label} = {:.6} +/- {:.6} (stderr)\n", e.mean, e.stderr)
}

fn run_tanaka(config: &CliConfig) -> Result<()> {
    let experiment = experiment_of(config, true)?;
    let result = run_ensemble(&experiment)?;

    let file = fs::File::create(config.out_dir.join("terms.csv"))?;
    let mut out = BufWriter::new(file);
    write_rows_csv(&mut out, result.rows.as_deref().unwrap_or(&[]))?;
    out.flush()?;
    let file = fs::File::create(config.out_dir.join("ensemble.csv"))?;
    let mut out = BufWriter::new(file);
    write_ensemble_csv(&mut out, &result)?;
    out.flush()?;

    let mut summary = config_echo(config);
    summary.push('\n');
    for &n in &config.ladder {
        summary.push_str(&format!("terms at level {}, n = {n}:\n", config.level));
        for term in [
            "abs_increment",
            "drift",
            "rs_total",
            "trace_sigma_prime",
            "trace_local",
            "skorokhod",
            "residual_tchange",
            "residual_tf",
        ] {
            if let Some(e) = result.estimate(config.level, n, term) {
                summary.push_str(&estimate_line(term, e));
            }
        }
        summary.push('\n');
    }
    if matches!(config.model, ModelSpec::Fbm) && config.level == 0.0 {
        summary.push_str(
            "oracle (fbm driver, level 0): E[trace_local(n)] = sqrt(2/pi) \
             (sqrt(T^(2H) + 1/n) - sqrt(1/n))\n",
        );
        for &n in &config.ladder {
            let oracle = fbm_trace_oracle(config.h.value(), config.horizon, n);
            if let Some(e) = result.estimate(config.level, n, "trace_local") {
                let z = if e.stderr > 0.0 {
                    (e.mean - oracle) / e.stderr
                } else {
                    0.0
                };
                summary.push_str(&format!(
                    "  n = {n}: oracle {oracle:.6}, measured {:.6}, z = {z:.2}\n",
                    e.mean
                ));
            }
        }
        let folded = (2.0 / std::f64::consts::PI).sqrt() * config.horizon.powf(config.h.value());
        summary.push_str(&format!(
            "  folded-normal limit E|B_T| = sqrt(2/pi) T^H = {folded:.6}\n\n"
        ));
    }
    if matches!(config.model, ModelSpec::Fbm | ModelSpec::Fou { .. }) {
        summary.push_str("oracle: E[skorokhod] = 0 (Skorokhod integrals are centered)\n");
        for &n in &config.ladder {
            if let Some(e) = result.estimate(config.level, n, "skorokhod") {
                let z = if e.stderr > 0.0 {
                    e.mean / e.stderr
                } else {
                    0.0
                };
                summary.push_str(&format!("  n = {n}: measured {:.6}, z = {z:.2}\n", e.mean));
            }
        }
    }
    write_text(&config.out_dir.join("summary.txt"), &summary)
}

fn run_pathwise(config: &CliConfig) -> Result<()> {
    let (drivers, solutions) = solutions_of(config)?;
    let coeffs = config.model.coefficients();
    let level = LevelX::new(config.level)?;
    let n = MollifierIndex::new(*config.ladder.last().expect("non-empty ladder"))?;

    let file = fs::File::create(config.out_dir.join("pathwise.csv"))?;
    let mut out = BufWriter::new(file);
    writeln!(
        out,
        "path_id,x,pathwise_residual,mollified_residual_n{}",
        n.n()
    )?;
    let mut sgn_res = Vec::with_capacity(config.paths);
    let mut moll_res = Vec::with_capacity(config.paths);
    for (i, (b, x)) in drivers.iter().zip(&solutions).enumerate() {
        let pres = pathwise_residual(x, &coeffs, level, b, None)?;
        let mres = mollified_residual_direct(x, &coeffs, level, n, b)?;
        writeln!(out, "{i},{:.16e},{pres:.16e},{mres:.16e}", config.level)?;
        sgn_res.push(pres);
        moll_res.push(mres);
    }
    out.flush()?;

    let abs_max = |v: &[f64]| v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let (pm, ps) = mean_std(&sgn_res);
    let (mm, ms) = mean_std(&moll_res);
    let summary = format!(
        "{}\nsign-integrand residual |X_T-x| - |X_0-x| - int sgn dX over {} paths:\n  \
         mean = {pm:.6}\n  std = {ps:.6}\n  max |residual| = {:.6}\n\n\
         mollified residual (n = {}):\n  mean = {mm:.6}\n  std = {ms:.6}\n  \
         max |residual| = {:.6}\n",
        config_echo(config),
        config.paths,
        abs_max(&sgn_res),
        n.n(),
        abs_max(&moll_res),
    );
    write_text(&config.out_dir.join("summary.txt"), &summary)
}

fn run_converge(config: &CliConfig) -> Result<()> {
    let experiment = experiment_of(config, false)?;
    let result = run_ensemble(&experiment)?;
    let (drivers, solutions) = solutions_of(config)?;
    let weights = KernelWeights::new(grid_of(config)?, config.h)?;
    let coeffs = config.model.coefficients();
    let ladder: Vec<MollifierIndex> = config
        .ladder
        .iter()
        .map(|&n| MollifierIndex::new(n))
        .collect::<Result<_>>()?;
    let l2 = if ladder.len() >= 2 {
        l2_trace_convergence(
            &solutions,
            &drivers,
            &coeffs,
            LevelX::new(config.level)?,
            &ladder,
            &weights,
            config.convention,
        )?
    } else {
        Vec::new()
    };

    let file = fs::File::create(config.out_dir.join("converge.csv"))?;
    let mut out = BufWriter::new(file);
    writeln!(
        out,
        "n,trace_local_mean,trace_local_stderr,residual_tf_mean,residual_tf_stderr,\
         l2_diff_prev"
    )?;
    for (i, &n) in config.ladder.iter().enumerate() {
        let tl = lookup(&result, config.level, n, "trace_local");
        let tf = lookup(&result, config.level, n, "residual_tf");
        let diff = if i == 0 { f64::NAN } else { l2[i - 1].mean };
        writeln!(
            out,
            "{n},{:.16e},{:.16e},{:.16e},{:.16e},{diff:.16e}",
            tl.mean, tl.stderr, tf.mean, tf.stderr
        )?;
    }
    out.flush()?;

    let mut summary = config_echo(config);
    summary.push_str("\nmollifier ladder convergence:\n");
    for (i, &n) in config.ladder.iter().enumerate() {
        let tl = lookup(&result, config.level, n, "trace_local");
        summary.push_str(&format!(
            "  n = {n}: trace_local = {:.6} +/- {:.6}\n",
            tl.mean, tl.stderr
        ));
        if i > 0 {
            summary.push_str(&format!(
                "  E[(T_{} - T_{n})^2] = {:.6e} +/- {:.1e}\n",
                config.ladder[i - 1],
                l2[i - 1].mean,
                l2[i - 1].stderr
            ));
        }
    }
    write_text(&config.out_dir.join("summary.txt"), &summary)
}

fn lookup(result: &EnsembleResult, level: f64, n: u64, term: &str) -> MCEstimate {
    *result
        .estimate(level, n, term)
        .expect("estimate key set covers levels x ladder x terms")
}

fn run_density(config: &CliConfig) -> Result<()> {
    let grid = grid_of(config)?;
    let k = (config.time / grid.dt()).round() as usize;
    let k = k.clamp(1, grid.steps());
    let (_, solutions) = solutions_of(config)?;
    let samples: Vec<f64> = solutions.iter().map(|x| x.values()[k]).collect();
    let t = k as f64 * grid.dt();
    let report = density_diagnostic(&samples, t, config.h)?;

    let file = fs::File::create(config.out_dir.join("density.csv"))?;
    let mut out = BufWriter::new(file);
    write_density_csv(&mut out, &report)?;
    out.flush()?;

    let mut summary = config_echo(config);
    summary.push_str(&format!(
        "\ndensity diagnostic at t = {t} ({} samples):\n",
        report.count
    ));
    if report.degenerate {
        summary.push_str("  degenerate sample (all values equal); no estimate\n");
        return write_text(&config.out_dir.join("summary.txt"), &summary);
    }
    summary.push_str(&format!("  bandwidth = {:.6}\n", report.bandwidth));
    summary.push_str(&format!(
        "  kde peak = {:.6} at x = {:.6}\n",
        report.sup_kde, report.peak_x
    ));
    if matches!(config.model, ModelSpec::Fbm) {
        let peak = 1.0 / (std::f64::consts::TAU * t.powf(2.0 * config.h.value())).sqrt();
        summary.push_str(&format!(
            "  gaussian oracle peak 1/sqrt(2 pi t^(2H)) = {peak:.6} \
             (1/sqrt(2 pi) = 0.398942 at t = 1)\n"
        ));
    }
    summary.push_str(&format!(
        "  order-zero bound C t^(-H) = {:.6} (C = {:.2}): {}\n",
        report.bound_value,
        report.bound_constant,
        if report.bound_satisfied {
            "satisfied"
        } else {
            "VIOLATED"
        }
    ));
    summary.push_str(&format!(
        "  tail slope of -log p vs x^2 = {:.4} (positive means sub-Gaussian or steeper)\n",
        report.tail_slope
    ));
    write_text(&config.out_dir.join("summary.txt"), &summary)
}
