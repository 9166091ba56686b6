use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Saliency-guided training and evaluation of binary CAM classifiers.
#[derive(Debug, Parser)]
#[command(name = "salience", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic training set and its shifted test sets.
    SynthData(Common),
    /// Train one model per seed.
    Train(Common),
    /// Train with the edge map in place of every heatmap.
    Fool(Common),
    /// Score every seed's checkpoint on the test sets.
    Eval(Common),
    /// Aggregate scored runs into AUROC tables.
    Report(Common),
    /// Draw input, true-class CAM, false-class CAM and difference map per sample.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set weights.beta=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output location; see the README for its meaning per command.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory or model.npz. Defaults to the first seed's run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset holding the samples. Defaults to `dataset_root`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sample to draw, one row each. Repeatable.
    #[arg(long = "sample", required = true)]
    samples: Vec<String>,
    #[arg(long, default_value_t = 128)]
    panel_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(c) => commands::synth_data(&c),
        Command::Train(c) => commands::train(&c, false),
        Command::Fool(c) => commands::train(&c, true),
        Command::Eval(c) => commands::eval(&c),
        Command::Report(c) => commands::report(&c),
        Command::Render(r) => commands::render(&r),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let message = failure.message.replace('\n', " ");
            eprintln!("error: {message}");
            ExitCode::from(failure.code)
        }
    }
}
