//! `se2gnn`: dataset generation, training, evaluation and equivariance
//! audits. Every command prints one JSON line on success.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use se2gnn::engine::Precision;
use se2gnn::model::ConvKind;
use se2gnn::Error;

/// Environment variable that overrides the precision of config files.
pub const PRECISION_ENV: &str = "SE2_PRECISION";

#[derive(Debug, Parser)]
#[command(name = "se2gnn", version, about = "SE(2)-equivariant graph networks for 2D flow surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a Tetris classification dataset.
    GenTetris(GenTetris),
    /// Simulate smoke trajectories and write them as a graph dataset.
    GenNs(GenNs),
    /// Train a classifier or a surrogate and save the best checkpoint.
    Train(Train),
    /// Score a checkpoint on a dataset.
    Eval(Eval),
    /// Measure equivariance errors of a model and of sampled nonlinearities.
    EquivCheck(EquivCheck),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Row {
    #[value(name = "1x2pi")]
    One,
    #[value(name = "2xpi")]
    Two,
    #[value(name = "4xpi2")]
    Four,
    #[value(name = "8xpi4")]
    Eight,
    #[value(name = "test")]
    Test,
}

#[derive(Debug, Args)]
struct GenTetris {
    #[arg(long, value_enum)]
    row: Row,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Open,
    Obstacle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ForceArg {
    Fixed,
    Varying,
}

#[derive(Debug, Args)]
struct GenNs {
    #[arg(long, value_enum, default_value_t = ScenarioArg::Open)]
    scenario: ScenarioArg,
    #[arg(long)]
    n_traj: usize,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 256)]
    nodes: usize,
    #[arg(long, value_enum, default_value_t = ForceArg::Fixed)]
    force: ForceArg,
    /// solver steps per trajectory (scenario default when absent)
    #[arg(long)]
    steps: Option<usize>,
    /// pressure solver tolerance
    #[arg(long)]
    cg_tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Tetris,
    Ns,
}

/// Flags override config files, which override the defaults.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long, value_parser = parse_conv_kind)]
    conv_kind: Option<ConvKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    data: PathBuf,
    /// Tetris test set; the standard 700 random rotations when absent
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    rollout_horizon: usize,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// also write the report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
struct ModelSource {
    #[arg(long, group = "source")]
    checkpoint: Option<PathBuf>,
    /// random weights of the given kind
    #[arg(long, group = "source", value_parser = parse_conv_kind)]
    random_model: Option<ConvKind>,
}

#[derive(Debug, Args)]
struct EquivCheck {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long, default_value_t = 64)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// sample counts for the Fourier nonlinearity table
    #[arg(long, value_delimiter = ',')]
    compare_fourier: Vec<usize>,
}

fn parse_conv_kind(s: &str) -> Result<ConvKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse::<u32>().ok().and_then(Precision::from_bits).ok_or_else(|| format!("precision must be 32 or 64, got {s}"))
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Failure {
        Failure { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match &e {
            Error::InvalidArgument(_) | Error::InvalidConfig(_) => 2,
            Error::SolverFailure { .. } | Error::TriangulationFailed(_) => 3,
            Error::Divergence(_) => 4,
            Error::Mismatch(_) | Error::CorruptFile { .. } | Error::MissingFile(_) => 5,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::GenTetris(a) => commands::gen_tetris(&a),
        Command::GenNs(a) => commands::gen_ns(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::EquivCheck(a) => commands::equiv_check(&a),
    };
    match out {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
