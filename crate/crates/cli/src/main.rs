mod commands;
mod config;
mod error;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::SplitName;
use config::RunConfig;
use error::CliResult;

/// Hierarchical spatial-temporal transformer for wind power forecasting.
#[derive(Parser)]
#[command(name = "hsttn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic farm as records.csv plus schema.txt.
    Synth {
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        turbines: u64,
        #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
        timestamps: u64,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        channels: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise multiplier; 0 gives a noiseless farm.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train a model and write checkpoint.bin and train_log.csv.
    Train(RunArgs),
    /// Forecast the horizon starting at --origin.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Timestamp index of the first forecast step.
        #[arg(long)]
        origin: usize,
    },
    /// Score a checkpoint on one split and write metrics.csv and metrics.txt.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Window stride; defaults to the configured eval_stride.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Render forecast against truth as forecast.svg.
    Plot {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Zero-based turbine position; all turbines when omitted.
        #[arg(long)]
        turbine: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding the configured one.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut run = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            run.out = out.clone();
        }
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        Ok(run)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { turbines, timestamps, channels, seed, noise, out } => {
            commands::synth(&commands::SynthOptions {
                turbines: turbines as usize,
                timestamps: timestamps as usize,
                channels: channels as usize,
                seed,
                noise,
                out,
            })
        }
        Command::Train(args) => commands::train_cmd(&args.load()?),
        Command::Predict { run, checkpoint, origin } => commands::predict_cmd(&run.load()?, &checkpoint, origin),
        Command::Evaluate { run, checkpoint, split, stride } => {
            commands::evaluate_cmd(&run.load()?, &checkpoint, split, stride)
        }
        Command::Plot { forecast, truth, turbine, out } => {
            commands::plot_cmd(&forecast, &truth, turbine, Path::new(&out))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HSTTN_LOG", "warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
