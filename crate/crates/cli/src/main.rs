//! `earl`: fit, evaluate, simulate and test individualized treatment rules.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "earl", version, about = "Doubly-robust estimation of individualized treatment rules")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Random seed. Overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a rule from a CSV file and write it as JSON.
    Fit(FitArgs),
    /// Estimate the value of a fitted rule on a CSV file.
    Evaluate(EvaluateArgs),
    /// Run the simulation grid and write one CSV row per fit.
    Simulate(SimulateArgs),
    /// Permutation tests for rule coefficients.
    Permtest(PermtestArgs),
}

/// Options shared by `fit` and `permtest`.
#[derive(Args, Debug, Clone, Default)]
pub struct FitOptions {
    /// JSON fit configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// earl, owl or ql.
    #[arg(long)]
    pub method: Option<String>,
    /// hinge, exp, logistic or sqhinge.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Choose lambda by cross-validation.
    #[arg(long)]
    pub select_lambda: bool,
    /// Fit by K-fold cross-fitting.
    #[arg(long)]
    pub crossfit: bool,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Rule basis, e.g. `linear` or `x1,x2,x1*x2`.
    #[arg(long)]
    pub rule_features: Option<String>,
    #[arg(long)]
    pub propensity_features: Option<String>,
    /// Outcome model basis, or `none` for Q = 0.
    #[arg(long)]
    pub outcome_features: Option<String>,
    /// Ridge penalty of the propensity model.
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// CSV with columns y, a, x1..xp.
    #[arg(long)]
    input: PathBuf,
    /// Output JSON; standard output if absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    options: FitOptions,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Rule JSON written by `fit`.
    #[arg(long)]
    rule: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct SimulateArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV; standard output if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Comma-separated, e.g. `1,2`.
    #[arg(long)]
    pub scenarios: Option<String>,
    /// Comma-separated subset of CC, CI, IC, II.
    #[arg(long)]
    pub specs: Option<String>,
    /// Comma-separated, e.g. `earl-logistic,owl,ql,aipwe`.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated sample sizes.
    #[arg(long = "n")]
    pub n_grid: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub validation_draws: Option<usize>,
    /// Use the configured lambda instead of cross-validation.
    #[arg(long)]
    pub fixed_lambda: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Record wall-clock seconds per fit.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug)]
struct PermtestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; standard output if absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// One-based covariate indices, comma-separated; all if absent.
    #[arg(long)]
    covariates: Option<String>,
    #[arg(long, default_value_t = earl_core::inference::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[command(flatten)]
    options: FitOptions,
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("EARL_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("EARL_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set up thread pool: {e}")))?;
    }
    let seeds = commands::Seeds { flag: cli.seed, env: env_seed()? };
    match cli.command {
        Command::Fit(a) => commands::fit(&a.input, a.output.as_deref(), &a.options, seeds),
        Command::Evaluate(a) => commands::evaluate(&a.rule, &a.input, a.output.as_deref()),
        Command::Simulate(a) => commands::simulate(&a, seeds),
        Command::Permtest(a) => commands::permtest(
            &a.input,
            a.output.as_deref(),
            a.covariates.as_deref(),
            a.permutations,
            &a.options,
            seeds,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
