//! `dbd`: train, evaluate and run the defocus blur detector from the shell.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable holding the `env_logger` filter (e.g. `debug`).
const LOG_ENV: &str = "DBD_LOG";

#[derive(Debug, Parser)]
#[command(name = "dbd", version, about = "Defocus blur detection with depth distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, train_log.jsonl and config.toml to --out.
    Train(TrainArgs),
    /// Score a checkpoint (or a directory of prediction PNGs) against a dataset.
    Eval(EvalArgs),
    /// Write `<stem>_defocus.png` and `<stem>_depth.pfm` for each image.
    Infer(InferArgs),
    /// Generate a synthetic dataset in the image/gt/depth layout.
    Synth(SynthArgs),
    /// Print the branches of a pyramid block with their receptive fields.
    RfTable(RfTableArgs),
    /// Overlay PR curves from metric reports; writes the image plus one CSV per curve.
    PlotPr(PlotPrArgs),
    /// Train and evaluate once per loss-balance weight γ.
    GammaSweep(GammaSweepArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run config; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (uses `<data>/train` when present).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    ckpt: Option<PathBuf>,
    /// Dataset root (uses `<data>/test` when present).
    #[arg(long)]
    data: PathBuf,
    /// Directory for report.json and pr_curve.csv; the report goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prediction PNGs (`<stem>.png` or `<stem>_defocus.png`) scored instead of a checkpoint.
    #[arg(conflicts_with = "ckpt")]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square side length in pixels.
    #[arg(long, default_value_t = 96)]
    size: usize,
}

#[derive(Debug, Args)]
struct RfTableArgs {
    /// srfb, sk or rfb.
    #[arg(long, default_value = "srfb")]
    block: String,
}

#[derive(Debug, Args)]
struct PlotPrArgs {
    /// Output raster (PNG).
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct GammaSweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with `train/` and optionally `test/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated γ values replacing the default sweep.
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.starts_with("For more information"))
                .collect();
            eprintln!(
                "error[usage]: {}",
                single_line(&text.join(" ")).trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Synth(a) => commands::synth(a),
        Command::RfTable(a) => commands::rf_table(a),
        Command::PlotPr(a) => plot::plot_pr(a),
        Command::GammaSweep(a) => commands::gamma_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::error_code(&e);
            let msg = e.to_string();
            let msg = msg
                .strip_prefix(&format!("{}: ", code.replace('-', " ")))
                .unwrap_or(&msg);
            eprintln!("error[{code}]: {}", single_line(msg));
            ExitCode::FAILURE
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
