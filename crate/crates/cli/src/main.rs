//! `gmlab`: command-line front end for gmlab-core.
//!
//! Exit codes: 0 success or pass, 1 usage or invalid input, 2 I/O or
//! parse failure, 3 no counterexample found, 4 refutation found.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmlab_core::lab::Strategy;
use gmlab_core::sim::DEFAULT_SEED;
use serde::Serialize;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NOT_FOUND: u8 = 3;
pub const EXIT_REFUTED: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "gmlab",
    version,
    about = "Variance comparisons between OLS and unbiased quadratic estimators"
)]
struct Cli {
    /// Seed for every random choice the command makes
    #[arg(long, global = true, env = "GMLAB_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// Output format
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Write output here instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Builtin {
    Ex1,
    Ex2,
    Ols,
    Gls,
    HansenTilde,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dimension of the space of admissible quadratic perturbations
    Analyze(AnalyzeArgs),
    /// Build or search for a quadratic estimator that beats OLS
    Counterexample(CounterexampleArgs),
    /// Probe an estimator for bias under finite-support error laws
    Refute(RefuteArgs),
    /// Monte Carlo check of the variances in a counterexample report
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    /// Design matrix (CSV or JSON array of rows)
    #[arg(long, conflicts_with = "builtin")]
    pub design: Option<PathBuf>,
    /// Built-in design: ex1 (location) or ex2 (two groups of two)
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
    /// Sample size of the ex1 design
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Include the basis matrices in the output
    #[arg(long)]
    pub basis: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct CounterexampleArgs {
    #[arg(long, conflicts_with = "builtin")]
    pub design: Option<PathBuf>,
    /// Built-in counterexample: ex1 or ex2
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
    /// Sample size of ex1
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Third moment of the first error in ex1
    #[arg(long, default_value_t = 1.5)]
    pub gamma: f64,
    /// Search strategy for --design
    #[arg(long, default_value_t = Strategy::RuleI)]
    pub strategy: Strategy,
    /// Number of search candidates
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    /// Skew weight p of the two-point error laws
    #[arg(long, default_value_t = gmlab_core::lab::DEFAULT_SKEW_P)]
    pub skew_p: f64,
    /// Use symmetric error laws only
    #[arg(long)]
    pub symmetric: bool,
    /// Attach a Monte Carlo confirmation with this many replications
    #[arg(long)]
    pub reps: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct RefuteArgs {
    /// builtin:ols | builtin:gls | builtin:hansen-tilde:i,j | file:PATH
    #[arg(long, conflicts_with = "builtin")]
    pub estimator: Option<String>,
    /// Built-in estimator; ex1 and ex2 refute the counterexample estimators
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
    /// Design matrix; defaults to the location design of size --n
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Covariance shape for builtin:gls (CSV or JSON)
    #[arg(long)]
    pub sigma: Option<PathBuf>,
    /// Row indices (zero-based) for hansen-tilde given via --builtin
    #[arg(long, value_delimiter = ',')]
    pub rows: Option<Vec<usize>>,
    /// Direction a of the hansen-tilde correction, comma separated
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub a: Option<Vec<f64>>,
    /// Number of probe attempts
    #[arg(long, default_value_t = 50)]
    pub budget: usize,
    /// Refutation threshold on ‖E β̂ - β‖
    #[arg(long, default_value_t = gmlab_core::refuter::REFUTE_TOL)]
    pub tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// JSON output of `gmlab counterexample`
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub reps: u64,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, A: Serialize> {
    pub command: &'static str,
    pub seed: u64,
    pub format: Format,
    pub out: Option<&'a PathBuf>,
    pub args: &'a A,
}

/// A command's result before rendering.
pub struct Outcome {
    pub result: serde_json::Value,
    pub table: Vec<(String, String)>,
    pub exit: u8,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<gmlab_core::Error>() {
            return match e {
                gmlab_core::Error::Io(_)
                | gmlab_core::Error::Json(_)
                | gmlab_core::Error::Parse { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let seed = cli.seed;
    let (name, config, outcome) = match &cli.command {
        Command::Analyze(a) => (
            "analyze",
            config("analyze", &cli, a)?,
            commands::analyze(a)?,
        ),
        Command::Counterexample(a) => (
            "counterexample",
            config("counterexample", &cli, a)?,
            commands::counterexample(a, seed)?,
        ),
        Command::Refute(a) => (
            "refute",
            config("refute", &cli, a)?,
            commands::refute(a, seed)?,
        ),
        Command::Simulate(a) => (
            "simulate",
            config("simulate", &cli, a)?,
            commands::simulate(a, seed)?,
        ),
    };
    let text = match cli.format {
        Format::Json => output::json_document(name, config, &outcome)?,
        Format::Table => output::table(name, &outcome.table),
    };
    output::emit(&text, cli.out.as_deref())?;
    Ok(outcome.exit)
}

fn config<A: Serialize>(
    command: &'static str,
    cli: &Cli,
    args: &A,
) -> anyhow::Result<serde_json::Value> {
    Ok(serde_json::to_value(RunConfig {
        command,
        seed: cli.seed,
        format: cli.format,
        out: cli.out.as_ref(),
        args,
    })?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
