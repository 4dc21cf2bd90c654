//! Command-line driver: gradient checks, parsing and dense-pose evaluation,
//! parameter counts, benchmarks and scale CDFs.
//!
//! [`run`] takes an argument vector and returns what would be printed and
//! the exit code, so the whole surface is testable in-process.
//!
//! Exit codes: 0 success, 1 a check failed its tolerance, 2 usage or input
//! format error.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

use clap::{Args, Parser, Subcommand};
use commands::{BenchArgs, EvalDensePoseArgs, EvalParsingArgs, Finished, EXIT_OK, EXIT_USAGE};
use config::ConfigFile;
use error::{CliError, CliResult};
use prcnn_core::branch::Variant;
use prcnn_core::metrics::PcpMode;
use prcnn_core::roi::ScaleMeasure;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "prcnn", version, about = "Parsing-branch kernels and instance-level parsing metrics")]
pub struct Cli {
    /// JSON config; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of analytic gradients.
    Gradcheck {
        /// Targets to check (default: all).
        targets: Vec<String>,
        /// One tolerance for every target instead of the per-tier defaults.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Print the known target names and exit.
        #[arg(long)]
        list: bool,
    },
    /// mIoU, AP^p_50, AP^p_vol and PCP_50 of predictions against ground truth.
    EvalParsing(EvalParsingCli),
    /// Dense-pose AP, AP50 and AP75 from geodesic point similarity.
    EvalDensepose(EvalDensePoseCli),
    /// Forward latency of branch variants.
    Bench(BenchCli),
    /// Parameter counts of every branch variant.
    Params {
        #[arg(long)]
        roi_resolution: Option<usize>,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Cumulative distribution of instance scale relative to the image.
    ScaleCdf {
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Strictly increasing, comma separated.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_measure)]
        measure: Option<ScaleMeasure>,
    },
}

#[derive(Debug, Args)]
pub struct EvalParsingCli {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Classes including background.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// `global` or `per_instance_mean`.
    #[arg(long, value_parser = parse_pcp_mode)]
    pub pcp_mode: Option<PcpMode>,
}

#[derive(Debug, Args)]
pub struct EvalDensePoseCli {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// GPS kernel width (default 0.255).
    #[arg(long)]
    pub kappa: Option<f64>,
    /// JSON geodesic distance table; Euclidean UV distance when omitted.
    #[arg(long)]
    pub geodesics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchCli {
    #[arg(long = "variant", value_parser = parse_variant)]
    pub variants: Vec<Variant>,
    #[arg(long = "roi-resolution")]
    pub roi_resolutions: Vec<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Use the full channel widths instead of the reduced bench widths.
    #[arg(long)]
    pub full_width: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: prcnn_core::Error| e.to_string())
}

fn parse_pcp_mode(s: &str) -> Result<PcpMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown PCP mode '{s}' (global, per_instance_mean)"))
}

fn parse_measure(s: &str) -> Result<ScaleMeasure, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown scale measure '{s}' (area, sqrt_area)"))
}

/// What a run printed and how it ended.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                Outcome {
                    code: EXIT_USAGE,
                    stderr: text,
                    ..Outcome::default()
                }
            } else {
                Outcome {
                    code: EXIT_OK,
                    stdout: text,
                    ..Outcome::default()
                }
            };
        }
    };
    let mut log = String::new();
    match execute(cli, &mut log) {
        Ok(o) => Outcome {
            stderr: log + &o.stderr,
            ..o
        },
        Err(e) => Outcome {
            code: EXIT_USAGE,
            stdout: String::new(),
            stderr: format!("{log}error: {e}\n"),
        },
    }
}

fn execute(cli: Cli, log: &mut String) -> CliResult<Outcome> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let seed = cli.seed.or(cfg.shared.seed).unwrap_or(0);
    let threads = cli.threads.or(cfg.shared.threads);
    let out = cli.out.clone().or(cfg.shared.out.clone());

    if let Command::Gradcheck { list: true, .. } = &cli.command {
        return Ok(Outcome {
            stdout: prcnn_core::gradcheck::targets::names().join("\n") + "\n",
            ..Outcome::default()
        });
    }

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    let finished: Finished = pool.install(|| dispatch(cli.command, &cfg, seed, log))?;

    match out {
        Some(path) => {
            std::fs::write(&path, &finished.json).map_err(|e| CliError::io(&path, e))?;
            Ok(Outcome {
                code: finished.code,
                ..Outcome::default()
            })
        }
        None => Ok(Outcome {
            code: finished.code,
            stdout: finished.json,
            stderr: String::new(),
        }),
    }
}

fn dispatch(command: Command, cfg: &ConfigFile, seed: u64, log: &mut String) -> CliResult<Finished> {
    match command {
        Command::Gradcheck { targets, tolerance, .. } => commands::gradcheck(targets, tolerance, cfg, seed, log),
        Command::EvalParsing(a) => commands::eval_parsing(
            EvalParsingArgs {
                pred: a.pred,
                gt: a.gt,
                num_classes: a.num_classes,
                pcp_mode: a.pcp_mode,
            },
            cfg,
            seed,
            log,
        ),
        Command::EvalDensepose(a) => commands::eval_densepose(
            EvalDensePoseArgs {
                pred: a.pred,
                gt: a.gt,
                kappa: a.kappa,
                geodesics: a.geodesics,
            },
            cfg,
            seed,
            log,
        ),
        Command::Bench(a) => commands::bench(
            BenchArgs {
                variants: a.variants,
                roi_resolutions: a.roi_resolutions,
                batch: a.batch,
                repeats: a.repeats,
                warmup: a.warmup,
                full_width: a.full_width,
            },
            cfg,
            seed,
            log,
        ),
        Command::Params {
            roi_resolution,
            num_classes,
        } => commands::params(roi_resolution, num_classes, cfg, seed, log),
        Command::ScaleCdf { gt, grid, measure } => commands::scale_cdf_cmd(gt, grid, measure, cfg, seed, log),
    }
}
