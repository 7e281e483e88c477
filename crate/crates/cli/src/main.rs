//! `repeater`: evaluate, optimize and sample repeater-chain protocols.
//!
//! Exit codes: 0 success, 1 validation report failed, 2 configuration or
//! input error, 3 numerical error, 4 output could not be written.

mod manifest;
mod output;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use repeater_core::evaluator::{eval_protocol_traced, EvalError};
use repeater_core::keyrate::{secret_key_rate_with, FractionMode, KeyRateError};
use repeater_core::montecarlo::{compare_to_exact, estimate_distribution, McError, McEstimate};
use repeater_core::optimizer::{optimize_cutoffs, Mode, OptimizationProblem, OptimizeError};
use repeater_core::protocol::{config_to_json, parse_config, Backend, Config, CutoffStrategy};
use thiserror::Error;

use manifest::{sha256_hex, sidecar_path, RunManifest};
use output::EvaluationFile;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Output(_) => 4,
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidProtocol(_)
            | EvalError::InvalidConfig(_)
            | EvalError::Unsupported { .. } => Self::Config(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::InvalidProtocol(_) | McError::NoSamples | McError::WindowMismatch { .. } => {
                Self::Config(e.to_string())
            }
            McError::StepCap { .. } => Self::Numerical(e.to_string()),
        }
    }
}

impl From<OptimizeError> for CliError {
    fn from(e: OptimizeError) -> Self {
        match e {
            OptimizeError::Eval(inner) => inner.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "repeater",
    version,
    about = "Waiting-time and fidelity analysis of repeater chains with cut-offs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Direct,
    Fourier,
    Fast,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Direct => Backend::Direct,
            BackendArg::Fourier => Backend::Fourier,
            BackendArg::Fast => Backend::Fast,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Uniform,
    Nonuniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    DifTime,
    MaxTime,
    Fidelity,
}

#[derive(Clone, Copy, ValueEnum)]
enum FractionArg {
    Averaged,
    Pointwise,
}

#[derive(Args)]
struct Overrides {
    /// Truncation time (overrides the config).
    #[arg(long)]
    ttr: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Zero-padding factor of the Fourier compounding.
    #[arg(long)]
    padding_factor: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the delivery distribution and secret-key rate.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// How the secret-key fraction is averaged over delivery times.
        #[arg(long, value_enum, default_value = "averaged")]
        fraction: FractionArg,
    },
    /// Search cut-off thresholds of a nested swap chain for the best rate.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Defaults to the strategy named in the config, else dif-time.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[command(flatten)]
        search: Search,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo histogram of delivery times.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(short = 'n', long)]
        n: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ttr: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check sampled histograms against an evaluated distribution.
    Compare {
        #[arg(long)]
        exact: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        /// Report destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn load_config(path: &Path, overrides: Option<&Overrides>) -> Result<(Config, String), CliError> {
    let text = read(path)?;
    let mut config =
        parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(o) = overrides {
        if let Some(ttr) = o.ttr {
            config.eval.ttr = ttr;
        }
        if let Some(b) = o.backend {
            config.eval.backend = b.into();
        }
        if let Some(c) = o.padding_factor {
            config.eval.padding_factor = c;
        }
    }
    if let Some(v) = config.eval.violations().into_iter().next() {
        return Err(CliError::Config(v.to_string()));
    }
    let hash = sha256_hex(config_to_json(&config.protocol, &config.eval).as_bytes());
    Ok((config, hash))
}

fn seed_or_draw(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random();
        eprintln!("seed: {s}");
        s
    })
}

fn evaluate(
    config: &Path,
    overrides: &Overrides,
    out: &Path,
    format: Format,
    fraction: FractionArg,
) -> Result<ExitCode, CliError> {
    let start = Instant::now();
    let (cfg, hash) = load_config(config, Some(overrides))?;
    let ev = eval_protocol_traced(&cfg.protocol, &cfg.eval)?;
    let mode = match fraction {
        FractionArg::Averaged => FractionMode::Averaged,
        FractionArg::Pointwise => FractionMode::Pointwise,
    };
    let report = match secret_key_rate_with(&ev.state, mode) {
        Ok(r) => Some(r),
        Err(KeyRateError::NoKey) => {
            eprintln!("no delivery within ttr={}; report omitted", cfg.eval.ttr);
            None
        }
        Err(e) => return Err(CliError::Numerical(e.to_string())),
    };

    let mut manifest = RunManifest::new("evaluate", hash);
    manifest.backend = Some(cfg.eval.backend);
    manifest.ttr = Some(cfg.eval.ttr);
    manifest.covered_mass = Some(ev.covered_mass);
    let rows = output::rows(&ev.state);
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    match format {
        Format::Csv => write(out, output::to_csv(&rows).as_bytes())?,
        Format::Json => write_json(
            out,
            &EvaluationFile {
                rows,
                report,
                manifest: manifest.clone(),
            },
        )?,
    }
    write_json(
        &sidecar_path(out),
        &serde_json::json!({ "manifest": manifest, "report": report }),
    )?;
    if let Some(r) = report {
        say(format_args!(
            "rate {:.6e}  w_bar {:.6}  f_bar {:.6}  t_bar {:.6e}  covered {:.6}",
            r.rate, r.w_bar, r.f_bar, r.t_bar, r.covered_mass
        ));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
struct Search {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_generations: Option<usize>,
    /// Lower end of the threshold search range.
    #[arg(long)]
    min_threshold: Option<f64>,
    /// Upper end of the threshold search range.
    #[arg(long)]
    max_threshold: Option<f64>,
}

fn optimize(
    config: &Path,
    mode: ModeArg,
    strategy: Option<StrategyArg>,
    search: &Search,
    overrides: &Overrides,
    out: &Path,
) -> Result<ExitCode, CliError> {
    let start = Instant::now();
    let (cfg, hash) = load_config(config, Some(overrides))?;
    let chain = cfg
        .nested
        .ok_or_else(|| CliError::Config("optimize needs a `nested_swap` protocol".into()))?;
    let strategy = match strategy {
        Some(StrategyArg::DifTime) => CutoffStrategy::DifTime,
        Some(StrategyArg::MaxTime) => CutoffStrategy::MaxTime,
        Some(StrategyArg::Fidelity) => CutoffStrategy::Fidelity,
        None => chain.strategy.unwrap_or(CutoffStrategy::DifTime),
    };
    let mode = match mode {
        ModeArg::Uniform => Mode::Uniform,
        ModeArg::Nonuniform => Mode::Nonuniform,
    };
    let seed = seed_or_draw(search.seed);
    let mut problem = OptimizationProblem::new(chain.levels, strategy, mode, seed);
    if let Some(g) = search.max_generations {
        problem.de.max_generations = g;
    }
    if search.min_threshold.is_some() || search.max_threshold.is_some() {
        let default = problem.bounds(cfg.eval.ttr);
        let lo = search.min_threshold.unwrap_or(default.lo);
        let hi = search.max_threshold.unwrap_or(default.hi);
        let limit = if strategy == CutoffStrategy::Fidelity {
            1.0
        } else {
            cfg.eval.ttr as f64
        };
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= limit) {
            return Err(CliError::Config(format!(
                "threshold range [{lo}, {hi}] must satisfy 0 <= min < max <= {limit}"
            )));
        }
        problem.range = Some((lo, hi));
    }
    let report = optimize_cutoffs(&problem, &cfg.eval)?;
    if report.no_key {
        eprintln!("no threshold yields a positive secret-key rate");
    }
    write_json(out, &report)?;

    let mut manifest = RunManifest::new("optimize", hash);
    manifest.seed = Some(seed);
    manifest.backend = Some(cfg.eval.backend);
    manifest.ttr = Some(cfg.eval.ttr);
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_json(
        &sidecar_path(out),
        &serde_json::json!({ "manifest": manifest }),
    )?;
    say(format_args!(
        "thresholds {:?}  rate {:.6e}  baseline {:.6e}",
        report.thresholds, report.rate, report.baseline_rate
    ));
    Ok(ExitCode::SUCCESS)
}

fn sample(
    config: &Path,
    n: u64,
    seed: Option<u64>,
    ttr: Option<usize>,
    out: &Path,
) -> Result<ExitCode, CliError> {
    let start = Instant::now();
    let overrides = Overrides {
        ttr,
        backend: None,
        padding_factor: None,
    };
    let (cfg, hash) = load_config(config, Some(&overrides))?;
    let seed = seed_or_draw(seed);
    let est = estimate_distribution(&cfg.protocol, &cfg.eval, n, seed)?;
    write_json(out, &est)?;

    let mut manifest = RunManifest::new("sample", hash);
    manifest.seed = Some(seed);
    manifest.ttr = Some(cfg.eval.ttr);
    manifest.covered_mass = Some(1.0 - est.overflow as f64 / est.n as f64);
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_json(
        &sidecar_path(out),
        &serde_json::json!({ "manifest": manifest }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn compare(exact: &Path, samples: &Path, out: Option<&Path>) -> Result<ExitCode, CliError> {
    let start = Instant::now();
    let exact_bytes = read(exact)?;
    let sample_bytes = read(samples)?;
    let text = String::from_utf8(exact_bytes.clone())
        .map_err(|e| CliError::Config(format!("{}: {e}", exact.display())))?;
    let ls = output::read_distribution(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", exact.display())))?;
    let est: McEstimate = serde_json::from_slice(&sample_bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", samples.display())))?;
    let report = compare_to_exact(&est, &ls)?;

    let mut both = exact_bytes;
    both.extend_from_slice(&sample_bytes);
    let mut manifest = RunManifest::new("compare", sha256_hex(&both));
    manifest.seed = Some(est.seed);
    manifest.ttr = Some(est.ttr);
    manifest.covered_mass = Some(ls.covered_mass());
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    match out {
        Some(path) => {
            write_json(path, &report)?;
            write_json(
                &sidecar_path(path),
                &serde_json::json!({ "manifest": manifest }),
            )?;
        }
        None => say(format_args!(
            "{}",
            serde_json::to_string_pretty(
                &serde_json::json!({ "report": report, "manifest": manifest })
            )
            .map_err(|e| CliError::Output(e.to_string()))?
        )),
    }
    eprintln!(
        "{}: max cdf gap {:.3e}, {} deciles checked",
        if report.pass { "pass" } else { "fail" },
        report.max_cdf_gap,
        report.deciles.len()
    );
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Caps the global worker pool when `REPEATER_THREADS` is set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("REPEATER_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            CliError::Config(format!(
                "REPEATER_THREADS={value:?} is not a positive integer"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    configure_threads()?;
    match cli.command {
        Command::Evaluate {
            config,
            overrides,
            out,
            format,
            fraction,
        } => evaluate(&config, &overrides, &out, format, fraction),
        Command::Optimize {
            config,
            mode,
            strategy,
            search,
            overrides,
            out,
        } => optimize(&config, mode, strategy, &search, &overrides, &out),
        Command::Sample {
            config,
            n,
            seed,
            ttr,
            out,
        } => sample(&config, n, seed, ttr, &out),
        Command::Compare {
            exact,
            samples,
            out,
        } => compare(&exact, &samples, out.as_deref()),
    }
}

/// Prints to stdout; a reader that went away (e.g. `| head`) is not an error.
fn say(args: std::fmt::Arguments) {
    let _ = writeln!(std::io::stdout().lock(), "{args}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Candidates far from the optimum routinely leave mass outside the
    // window; warning about each one would drown the output.
    let filter = match cli.command {
        Command::Optimize { .. } => "warn,repeater_core::evaluator=error",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(filter)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
