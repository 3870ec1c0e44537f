//! `rate-alloc`: analyze, allocate, simulate and compare measurement
//! allocations for block compressed sensing, and solve standalone
//! allocation programs.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rate_alloc::synthetic::SyntheticKind;
use rate_alloc::CurveParams;

use error::CliError;

#[derive(Parser)]
#[command(name = "rate-alloc", version, about = "Measurement-bound driven rate allocation for block compressed sensing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold analysis: per-block sparsity and measurement bounds.
    Analyze(ImageArgs),
    /// Single-stage allocation plan.
    Allocate {
        #[command(flatten)]
        image: ImageArgs,
        /// `bounds` apportions by measurement bounds, `uniform` splits evenly.
        #[arg(long, value_enum, default_value_t = Policy::Bounds)]
        policy: Policy,
    },
    /// Multi-stage sampling with adjoint reconstruction.
    Simulate(SimulateArgs),
    /// Solve one allocation program read from a JSON file.
    Solve {
        /// Problem file: {"p": [...], "r": [...], "alpha": x, "a": [...]}.
        problem: PathBuf,
        /// Cross-check against bisection and the KKT conditions.
        #[arg(long)]
        verify: bool,
        /// Also write solution.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Uniform vs single-stage vs multi-stage on one image and operator.
    Compare(SimulateArgs),
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["image", "synthetic"]))]
struct ImageArgs {
    /// Input graymap (P2 or P5).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Built-in test image instead of a file.
    #[arg(long, value_parser = parse_synthetic)]
    synthetic: Option<SyntheticKind>,
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    /// Sampling rate in (0, 1].
    #[arg(long)]
    rate: f64,
    /// Rate/sparsity curve as a,b,sr1,ps1.
    #[arg(long, value_parser = parse_curve, default_value = "78.77,0.0444,0.01,0.005")]
    curve: CurveParams,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    image: ImageArgs,
    #[arg(long, default_value_t = 2)]
    stages: usize,
    /// Seed of the measurement operator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PredictorKind::Oracle)]
    predictor: PredictorKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Bounds,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorKind {
    Oracle,
    Energy,
}

fn parse_synthetic(s: &str) -> Result<SyntheticKind, String> {
    s.parse()
}

fn parse_curve(s: &str) -> Result<CurveParams, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, s_r1, p_s1] => CurveParams::new(a, b, s_r1, p_s1).map_err(|e| e.to_string()),
        _ => Err(format!("expected four comma-separated values, got {}", parts.len())),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("RATE_ALLOC_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::input(format!("RATE_ALLOC_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::internal(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Analyze(args) => commands::analyze(&args),
        Command::Allocate { image, policy } => commands::allocate(&image, policy),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Solve { problem, verify, out } => commands::solve(&problem, verify, out.as_deref()),
        Command::Compare(args) => commands::compare(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn curve_parsing() {
        assert_eq!(parse_curve("78.77,0.0444,0.01,0.005").unwrap(), CurveParams::default());
        assert_eq!(parse_curve(" 1, 2 ,0.1,0.2").unwrap(), CurveParams::new(1.0, 2.0, 0.1, 0.2).unwrap());
        assert!(parse_curve("1,2,3").is_err());
        assert!(parse_curve("1,x,0.1,0.2").is_err());
        assert!(parse_curve("-1,2,0.1,0.2").is_err());
    }

    #[test]
    fn defaults() {
        let cli = Cli::try_parse_from(["rate-alloc", "simulate", "--synthetic", "flat", "--rate", "0.1"]).unwrap();
        let Command::Simulate(args) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(args.image.block_size, 32);
        assert_eq!(args.image.curve, CurveParams::default());
        assert_eq!(args.stages, 2);
        assert_eq!(args.seed, 0);
        assert!(matches!(args.predictor, PredictorKind::Oracle));
    }

    #[test]
    fn image_sources_are_exclusive() {
        let both = ["rate-alloc", "analyze", "--synthetic", "flat", "--image", "x.pgm", "--rate", "0.1"];
        assert!(Cli::try_parse_from(both).is_err());
        assert!(Cli::try_parse_from(["rate-alloc", "analyze", "--rate", "0.1"]).is_err());
    }
}
