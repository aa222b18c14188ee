mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{cmd_eval, cmd_full, cmd_synth, cmd_train, CliError};
use config::{ConfigError, RunConfig};

/// Contrastive predictive coding anomaly detection for multivariate time series.
#[derive(Parser)]
#[command(name = "cpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clean training CSV and a labeled test CSV to <out>.
    Synth(Overrides),
    /// Train on a CSV; writes the checkpoint and its loss curve.
    Train {
        train_csv: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit the latent Gaussian on train data, sweep thresholds on test data.
    Eval {
        train_csv: PathBuf,
        test_csv: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// synth, train and eval in one run; prints best_f1=<value>.
    Full(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// key = value file applied before the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_m: Option<String>,
    #[arg(long)]
    obs_len: Option<String>,
    #[arg(long)]
    pred_len: Option<String>,
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    anomaly_fraction: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    report: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_m", &self.batch_m),
            ("obs_len", &self.obs_len),
            ("pred_len", &self.pred_len),
            ("latent_dim", &self.latent_dim),
            ("learning_rate", &self.learning_rate),
            ("anomaly_fraction", &self.anomaly_fraction),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("report", &self.report),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(&format!("--{}", key.replace('_', "-")), key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(o) => cmd_synth(&o.resolve()?).map(drop),
        Command::Train { train_csv, overrides } => cmd_train(&overrides.resolve()?, &train_csv).map(drop),
        Command::Eval {
            train_csv,
            test_csv,
            overrides,
        } => cmd_eval(&overrides.resolve()?, &train_csv, &test_csv).map(drop),
        Command::Full(o) => cmd_full(&o.resolve()?).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let keys = RunConfig::keys_help();
    let command = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|sub| sub.after_help(keys.clone()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
