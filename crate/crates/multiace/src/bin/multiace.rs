use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multiace::cli::{run_command, GlobalOpts};
use multiace::model::Precision;

/// Configurable E(3)-equivariant atom-centered interatomic potentials.
#[derive(Parser)]
#[command(name = "multiace", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (INI-style sections, strictly validated)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed override
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Evaluation precision
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,

    /// Directory for output files
    #[arg(long, global = true, default_value = ".")]
    output: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form ridge fit of the single-layer linear expansion
    FitLinear,
    /// Gradient training of a message passing model
    Train,
    /// Evaluate a model archive against a labeled dataset
    Eval,
    /// Energy along a bond / angle / dihedral scan
    Scan,
    /// Two-atom dissociation curve
    Dimer,
    /// Body-ordered energy decomposition of a dataset
    Decompose,
    /// Run the property-check suites (nonzero exit on failure)
    Check,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let name = match args.command {
        Command::FitLinear => "fit-linear",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Scan => "scan",
        Command::Dimer => "dimer",
        Command::Decompose => "decompose",
        Command::Check => "check",
    };
    let Some(config) = args.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    let opts = GlobalOpts {
        seed: args.seed,
        precision: args.precision.as_deref().map(|p| match p {
            "f32" => Precision::F32,
            _ => Precision::F64,
        }),
        output_dir: args.output,
    };
    match run_command(name, &config, &opts) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
