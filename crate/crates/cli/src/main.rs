mod commands;
mod config;
mod manifest;
mod svg;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dceseg", version, about = "Liver segmentation on multi-phase DCE-MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Separable,
    Ambiguity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricName {
    Dsc,
    Hd95,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TestName {
    T,
    Wilcoxon,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom cases.
    PhantomGen {
        /// Phantom description (TOML).
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "separable")]
        preset: Preset,
        /// In-plane grid size for presets; a multiple of 8.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        cases: usize,
    },
    /// Train a network described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment every series in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the foreground probability maps.
        #[arg(long)]
        probabilities: bool,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired significance test between two metrics files.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "dsc")]
        metric: MetricName,
        #[arg(long, value_enum, default_value = "wilcoxon")]
        test: TestName,
    },
    /// Box plots of one or more metrics files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PhantomGen {
            spec,
            preset,
            size,
            out,
            seed,
            cases,
        } => commands::phantom_gen(spec.as_deref(), preset, size, &out, seed, cases),
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Predict {
            checkpoint,
            input,
            out,
            probabilities,
        } => commands::predict(&checkpoint, &input, &out, probabilities),
        Command::Evaluate { pred, gt, out } => commands::evaluate(&pred, &gt, &out),
        Command::Compare { a, b, metric, test } => commands::compare(&a, &b, metric, test),
        Command::Report { metrics, out } => commands::report(&metrics, &out),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use dceseg_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Shape(_)) => "shape",
        Some(E::InvalidArgument(_)) => "invalid_argument",
        Some(E::NonFinite(_) | E::NonFiniteGradient(_)) => "non_finite",
        Some(E::Tape(_)) => "autodiff",
        Some(E::Degenerate(_)) => "degenerate",
        Some(E::Format { .. }) => "format",
        Some(E::Io { .. }) => "io",
        None => "error",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": error_kind(&err),
                "message": format!("{err:#}"),
            });
            let _ = writeln!(std::io::stderr(), "{line}");
            ExitCode::FAILURE
        }
    }
}
