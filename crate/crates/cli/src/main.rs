//! `symclone`: clone equivariant layers into block-MLP students, benchmark them on
//! translated / rotated MNIST, and inspect the results.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 cloning did not
//! converge (artifacts are still written), 1 numerical failure.

mod bench;
mod clone;
mod fetch;
mod inspect;
mod output;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "symclone", version, about = "Symmetry cloning of equivariant convolutions into block-MLP layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clone one student layer per grid against an equivariant teacher.
    Clone(clone::CloneArgs),
    /// Measure equivariance error of the layers in a cloned checkpoint.
    EvalEquiv(clone::EvalArgs),
    /// Train and evaluate a benchmark model (or the whole results grid with --all).
    Bench(bench::BenchArgs),
    /// Compare a cloned 9-block layer with the unrolled convolution matrix.
    InspectToeplitz(inspect::ToeplitzArgs),
    /// Write feature-map images of teacher, cloned and untrained layers.
    ExportMaps(inspect::MapsArgs),
    /// Download the MNIST IDX files and verify their checksums.
    FetchData(fetch::FetchArgs),
}

/// Successful runs that still need a non-zero exit.
pub enum Outcome {
    Done,
    NotConverged,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use symclone_core::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) | Error::Backward(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Clone(a) => clone::run_clone(a),
        Command::EvalEquiv(a) => clone::run_eval(a),
        Command::Bench(a) => bench::run(a),
        Command::InspectToeplitz(a) => inspect::run_toeplitz(a),
        Command::ExportMaps(a) => inspect::run_maps(a),
        Command::FetchData(a) => fetch::run(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("symclone: cloning did not converge within the step budget");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("symclone: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
