use clap::{Parser, Subcommand};
use koopman_lmi::cli;
use koopman_lmi::config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

/// Koopman operator approximation with LMI-constrained regression and
/// system-norm regularization.
#[derive(Parser)]
#[command(name = "koopman", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonOpts {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Repeatable config override, e.g. `--set regression.beta=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a Koopman model per the config; writes model.json, report.json,
    /// iterations.csv.
    Fit {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Multi-step prediction of recorded episodes with a stored model.
    Predict {
        /// Model JSON produced by `fit`.
        #[arg(long)]
        model: PathBuf,
        /// Episode CSV file.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated episode ids (default: all).
        #[arg(long)]
        episodes: Option<String>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Summary table and Bode data for a set of models on a test file.
    Compare {
        /// Model JSON files.
        #[arg(long, num_args = 1..)]
        models: Vec<PathBuf>,
        /// Episode CSV file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Stability, conditioning, spectra and Bode data of a stored model.
    Analyze {
        /// Model JSON produced by `fit`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Generate a synthetic dataset in the episode CSV format.
    Datagen {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn load_config(common: &CommonOpts, required: bool) -> Result<ExperimentConfig, koopman_lmi::Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if required => {
            return Err(koopman_lmi::Error::Config(
                "--config is required for this command".into(),
            ))
        }
        None => ExperimentConfig::default(),
    };
    for spec in &common.set {
        config.apply_override(spec)?;
    }
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    Ok(config)
}

fn out_dir(common: &CommonOpts, config: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run() -> Result<(), koopman_lmi::Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Fit { common } => {
            let config = load_config(common, true)?;
            cli::cmd_fit(&config, &out_dir(common, &config))
        }
        Command::Predict {
            model,
            data,
            episodes,
            common,
        } => {
            let config = load_config(common, false)?;
            cli::cmd_predict(
                model,
                data,
                episodes.as_deref(),
                &config,
                &out_dir(common, &config),
            )
        }
        Command::Compare {
            models,
            data,
            common,
        } => {
            let config = load_config(common, false)?;
            cli::cmd_compare(models, data, &config, &out_dir(common, &config))
        }
        Command::Analyze { model, common } => {
            let config = load_config(common, false)?;
            cli::cmd_analyze(model, &config, &out_dir(common, &config))
        }
        Command::Datagen { common } => {
            let config = load_config(common, true)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("episodes.csv"));
            cli::cmd_datagen(&config, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
