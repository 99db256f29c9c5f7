mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dietcnn::ErrorClass;

use config::Overrides;

#[derive(Debug, Parser)]
#[command(
    name = "dietcnn",
    version,
    about = "Multiplication-free CNN inference through lookup tables"
)]
struct Cli {
    /// Worker threads (1 gives bitwise-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a float LeNet-5 on MNIST.
    Train(commands::TrainArgs),
    /// Calibrate codebooks, build the tables and write a diet bundle.
    Transform(commands::TransformArgs),
    /// Compare float and diet predictions on an MNIST split.
    Infer(commands::InferArgs),
    /// Operation counts, speedup, energy and footprint reports.
    Analyze(commands::AnalyzeArgs),
    /// Order sensitivity of the symbolic adder.
    Assoc(commands::AssocArgs),
    /// Accuracy over a grid of codebook sizes.
    Gridsearch(commands::GridArgs),
}

/// Malformed configuration that is not a library error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dietcnn::Error>() {
            return match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Invariant => 4,
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let cfg = config::RunConfig::load(&cli.overrides)?;
    match cli.command {
        Command::Train(a) => commands::train(cfg, a),
        Command::Transform(a) => commands::transform(cfg, a),
        Command::Infer(a) => commands::infer(cfg, a),
        Command::Analyze(a) => commands::analyze(cfg, a),
        Command::Assoc(a) => commands::assoc(cfg, a),
        Command::Gridsearch(a) => commands::gridsearch(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Optional report destination shared by the commands.
#[derive(Debug, Clone, clap::Args)]
pub struct ReportArg {
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}
