mod commands;
mod manifest;

use clap::{Parser, Subcommand, ValueEnum};
use manifest::RunManifest;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "epiforge",
    version,
    about = "Spatial SEIRD simulation and learned-integrator forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelKind {
    Drrnn,
    Lstm,
    Rnn,
}

#[derive(Subcommand)]
enum Command {
    /// Run the spatial SEIRD scenario and write daily snapshots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain on the well-mixed model, then fine-tune on observed days.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Snapshot CSV written by `simulate`.
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "drrnn")]
        model: ModelKind,
        /// Hidden size of the recurrent baselines.
        #[arg(long, default_value_t = 16)]
        hidden: usize,
    },
    /// Roll a trained model forward from the last training day.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, default_value_t = 14, allow_negative_numbers = true)]
        horizon: i64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a forecast against observed truth.
    Evaluate {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the DR-RNN, LSTM and RNN gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value = "epiforge-gradcheck")]
        out: PathBuf,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<epiforge_core::Error> for Failure {
    fn from(e: epiforge_core::Error) -> Self {
        let code = if e.is_numerical() { 3 } else { 2 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, out) = match &cli.command {
        Command::Simulate { out, .. } => ("simulate", out),
        Command::Train { out, .. } => ("train", out),
        Command::Forecast { out, .. } => ("forecast", out),
        Command::Evaluate { out, .. } => ("evaluate", out),
        Command::Gradcheck { out, .. } => ("gradcheck", out),
    };
    let mut manifest = RunManifest::start(name, out);
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: cannot create output directory {}: {e}", out.display());
        return ExitCode::from(2);
    }

    let result = match &cli.command {
        Command::Simulate { config, out, seed } => commands::simulate(config, out, *seed, &mut manifest),
        Command::Train {
            config,
            snapshots,
            out,
            seed,
            model,
            hidden,
        } => commands::train(config, snapshots, out, *seed, *model, *hidden, &mut manifest),
        Command::Forecast {
            config,
            params,
            snapshots,
            horizon,
            out,
            seed,
        } => commands::forecast(config, params, snapshots, *horizon, out, *seed, &mut manifest),
        Command::Evaluate { forecast, truth, out } => commands::evaluate(forecast, truth, out, &mut manifest),
        Command::Gradcheck {
            seed,
            instances,
            out,
            corrupt_gradient,
        } => commands::gradcheck(*seed, *instances, *corrupt_gradient, out, &mut manifest),
    };

    let code = match &result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    };
    manifest.finish(code, result.err().map(|f| f.message));
    if let Err(e) = manifest.write(out) {
        eprintln!("error: cannot write run manifest: {e}");
        return ExitCode::from(if code == 0 { 2 } else { code });
    }
    ExitCode::from(code)
}
