//! Command-line experiment runner: config-driven training, sampling,
//! privacy accounting and evaluation, with machine-readable outputs.
//!
//! Exit codes: 0 success, 2 validation error (bad config/arguments),
//! 3 runtime error.

// Validation deliberately writes `!(x > 0.0)` so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod cmd_account;
mod cmd_eval;
mod cmd_sample;
mod cmd_train;
mod common;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dp_diffusion::accountant::Conversion;
use dp_diffusion::metrics::SamplerKind;

#[derive(Parser)]
#[command(
    name = "dp-diffusion",
    version,
    about = "Differentially private diffusion models on an analytic 2D testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw samples from a checkpoint or from the analytic oracle.
    Sample {
        /// Checkpoint produced by `train`.
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the analytic mixture denoiser instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        /// JSON mixture spec for oracle mode (defaults to the nine-mode mixture).
        #[arg(long, requires = "oracle")]
        oracle_spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ddim-stoch")]
        sampler: SamplerArg,
        /// Schedule steps M (defaults: 1000, or 50 for ddim-det).
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, default_value_t = 0.002)]
        sigma_min: f64,
        #[arg(long, default_value_t = 80.0)]
        sigma_max: f64,
        #[arg(long, default_value_t = 7.0)]
        rho: f64,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50.0)]
        s_churn: f64,
        #[arg(long, default_value_t = 0.05)]
        s_min: f64,
        #[arg(long, default_value_t = 50.0)]
        s_max: f64,
        #[arg(long, default_value_t = 1.0)]
        s_noise: f64,
        /// Classifier-free guidance scale w.
        #[arg(long, default_value_t = 0.0)]
        guidance_w: f64,
        /// Class label to condition on.
        #[arg(long)]
        label: Option<usize>,
        /// Sample with the raw (non-EMA) weights.
        #[arg(long)]
        raw_weights: bool,
        /// Output CSV path.
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
        /// Optional SVG scatter plot path.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Compute epsilon for a given noise multiplier.
    Account {
        #[arg(long)]
        sigma: f64,
        #[command(flatten)]
        mech: MechanismArgs,
        /// Write the full per-order RDP curve as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Calibrate the noise multiplier for a target budget.
    Calibrate {
        #[arg(long)]
        target_eps: f64,
        #[command(flatten)]
        mech: MechanismArgs,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate mode coverage, denoiser complexity or gradient variance.
    Eval {
        #[arg(long, value_enum)]
        metric: MetricArg,
        /// Checkpoint to evaluate (EMA weights).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the analytic oracle denoiser instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// vicinity: number of samples (default 1e6).
        #[arg(long)]
        samples: Option<usize>,
        /// vicinity: sampler used when --oracle/--checkpoint is given.
        #[arg(long, value_enum, default_value = "ddim-stoch")]
        sampler: SamplerArg,
        /// Schedule steps M for sampling-based metrics.
        #[arg(long)]
        m: Option<usize>,
        /// complexity: comma-separated noise levels.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        /// complexity: Monte-Carlo points per sigma.
        #[arg(long, default_value_t = 200)]
        mc: usize,
        /// complexity: skip the end-to-end DDIM Jacobian.
        #[arg(long)]
        no_endtoend: bool,
        /// variance: comma-separated noise multiplicities.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// variance: reseeds per multiplicity.
        #[arg(long, default_value_t = 1000)]
        reseeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the metric CSVs.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the analytic oracle's constants and closed-form values.
    OracleInfo {
        /// Evaluate density/score/denoiser at this point, e.g. --x 0.3,-0.2.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
    },
}

#[derive(clap::Args)]
struct MechanismArgs {
    /// Subsampling rate q (alternative: --batch with --n).
    #[arg(long, conflicts_with = "batch")]
    q: Option<f64>,
    /// Expected batch size B.
    #[arg(long, requires = "n")]
    batch: Option<f64>,
    /// Dataset size N.
    #[arg(long)]
    n: Option<usize>,
    /// Composition steps T (alternative: --epochs, T = epochs * round(1/q)).
    #[arg(long, conflicts_with = "epochs")]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    delta: f64,
    #[arg(long, value_enum, default_value = "refined")]
    conversion: ConversionArg,
}

#[derive(Copy, Clone, PartialEq, Eq, clap::ValueEnum)]
enum ConversionArg {
    /// eps(alpha) + log(1/delta)/(alpha-1).
    Simple,
    /// The tighter rule used by common DP-SGD accounting libraries.
    Refined,
}

impl From<ConversionArg> for Conversion {
    fn from(c: ConversionArg) -> Self {
        match c {
            ConversionArg::Simple => Conversion::Simple,
            ConversionArg::Refined => Conversion::Refined,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, clap::ValueEnum)]
enum SamplerArg {
    DdimDet,
    DdimStoch,
    Churn,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::DdimDet => SamplerKind::DdimDet,
            SamplerArg::DdimStoch => SamplerKind::DdimStoch,
            SamplerArg::Churn => SamplerKind::Churn,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, clap::ValueEnum)]
enum MetricArg {
    Vicinity,
    Complexity,
    Variance,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(common::exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> dp_diffusion::Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train::run(&config),
        Command::Sample {
            checkpoint,
            oracle,
            oracle_spec,
            sampler,
            m,
            sigma_min,
            sigma_max,
            rho,
            n,
            seed,
            s_churn,
            s_min,
            s_max,
            s_noise,
            guidance_w,
            label,
            raw_weights,
            out,
            svg,
        } => cmd_sample::run(cmd_sample::Args {
            checkpoint,
            oracle,
            oracle_spec,
            sampler: sampler.into(),
            m,
            sigma_min,
            sigma_max,
            rho,
            n,
            seed,
            churn: dp_diffusion::samplers::ChurnSpec {
                s_churn,
                s_min,
                s_max,
                s_noise,
            },
            guidance_w,
            label,
            raw_weights,
            out,
            svg,
        }),
        Command::Account { sigma, mech, csv } => cmd_account::account(sigma, &mech, csv.as_deref()),
        Command::Calibrate {
            target_eps,
            mech,
            tol,
            csv,
        } => cmd_account::calibrate(target_eps, &mech, tol, csv.as_deref()),
        Command::Eval {
            metric,
            checkpoint,
            oracle,
            samples,
            sampler,
            m,
            sigmas,
            mc,
            no_endtoend,
            k,
            reseeds,
            seed,
            out,
        } => cmd_eval::run(cmd_eval::Args {
            metric,
            checkpoint,
            oracle,
            samples,
            sampler: sampler.into(),
            m,
            sigmas,
            mc,
            no_endtoend,
            k_list: k,
            reseeds,
            seed,
            out,
        }),
        Command::OracleInfo { x, sigma } => cmd_eval::oracle_info(x, sigma),
    }
}
