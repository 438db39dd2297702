//! `tfmixer`: synthesize data, train, evaluate, forecast and export spectra.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort,
//! 1 anything else.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfmixer::model::{Ablation, Ablations};

use commands::{Context, Split};
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "tfmixer", version, about = "Forecasting for irregular multivariate time series")]
#[command(after_help = "The output directory can be overridden with the TFMIXER_OUT_DIR environment variable.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides `train.seed` and `synth.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Remove a component; repeatable.
    #[arg(long = "ablate", value_name = "FLAG", value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
}

#[derive(Args)]
struct Inference {
    /// Checkpoint to load; defaults to `<out_dir>/checkpoint.bin`.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dataset split to read.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `[synth]` section.
    Synth(Common),
    /// Train a model and write checkpoint, history and manifest.
    Train(Common),
    /// Score a checkpoint; writes metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
    },
    /// Predict every query; writes forecast.csv.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
    },
    /// Export the mean refined spectrum; writes spectrum.csv.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
        /// Also render spectrum.png.
        #[arg(long)]
        plot: bool,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: tfmixer::Error| e.to_string())
}

fn context(common: &Common) -> Result<Context, CliError> {
    let mut config = RunConfig::load(&common.config)?;
    config.resolve_out_dir();
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        if let Some(s) = config.synth.as_mut() {
            s.seed = seed;
        }
    }
    for &a in &common.ablate {
        config.train.ablations.insert(a);
    }
    config.train.validate()?;
    Ok(Context {
        config,
        config_path: common.config.clone(),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(common) => commands::synth(&context(&common)?),
        Command::Train(common) => commands::train_cmd(&mut context(&common)?),
        Command::Eval { common, inference } => {
            let extra: Ablations = common.ablate.iter().copied().collect();
            commands::eval(&context(&common)?, inference.checkpoint.as_deref(), inference.split, &extra)
        }
        Command::Forecast { common, inference } => {
            let extra: Ablations = common.ablate.iter().copied().collect();
            commands::forecast(&context(&common)?, inference.checkpoint.as_deref(), inference.split, &extra)
        }
        Command::Spectrum { common, inference, plot } => {
            let extra: Ablations = common.ablate.iter().copied().collect();
            commands::spectrum(&context(&common)?, inference.checkpoint.as_deref(), inference.split, &extra, plot)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
