//! The four subcommands. Each returns the paths it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use cpc_core::data::{
    apply_normalizer, fit_normalizer, load_csv, make_windows, synth_train_test, write_csv, CsvOptions,
    MvtsDataset, NormalizerStats,
};
use cpc_core::model::CpcModel;
use cpc_core::scorer::{evaluate, EvalReport};
use cpc_core::trainer::{load_checkpoint, save_checkpoint, train, TrainReport};
use log::warn;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("synth: {0}")]
    Synth(String),
    #[error("train: {0}")]
    Train(String),
    #[error("eval: {0}")]
    Eval(String),
}

impl CliError {
    /// Process exit code; each stage has its own.
    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Synth(_) => 3,
            Self::Train(_) => 4,
            Self::Eval(_) => 5,
        }
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed run never leaves a partial artifact under the final name.
fn write_atomic<E: std::fmt::Display>(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<(), String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(format!("{}: {e}", path.display()));
    }
    fs::rename(&tmp, path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load(path: &Path) -> Result<MvtsDataset, String> {
    let options = CsvOptions::detect(path).map_err(|e| e.to_string())?;
    load_csv(path, &options).map_err(|e| e.to_string())
}

fn constant_channel_warnings(stats: &NormalizerStats) -> Vec<String> {
    stats
        .constant_channels()
        .into_iter()
        .map(|name| {
            format!(
                "channel {name:?} is constant in the training data; it is only mean-centered, \
                 and anomalies that appear as fluctuations of this channel are likely missed"
            )
        })
        .collect()
}

/// Percentage of rows labeled anomalous, or 0 when unlabeled.
fn anomaly_percent(ds: &MvtsDataset) -> f64 {
    100.0 * ds.anomaly_fraction().unwrap_or(0.0)
}

pub struct SynthOutput {
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput, CliError> {
    cfg.validate()?;
    let (train_ds, test_ds) =
        synth_train_test(&cfg.synth_config(), cfg.test_length).map_err(|e| CliError::Synth(e.to_string()))?;
    let out = SynthOutput {
        train_csv: cfg.out.join("train.csv"),
        test_csv: cfg.out.join("test.csv"),
    };
    for (path, ds) in [(&out.train_csv, &train_ds), (&out.test_csv, &test_ds)] {
        write_atomic(path, |tmp| write_csv(ds, tmp)).map_err(CliError::Synth)?;
    }
    for (name, ds) in [("train", &train_ds), ("test", &test_ds)] {
        println!(
            "{name}: T={} m={} anomalies={:.4}%",
            ds.len(),
            ds.channels(),
            anomaly_percent(ds)
        );
    }
    Ok(out)
}

/// Loss curve written next to the checkpoint.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn cmd_train(cfg: &RunConfig, train_csv: &Path) -> Result<TrainReport, CliError> {
    cfg.validate()?;
    let fail = CliError::Train;
    let raw = load(train_csv).map_err(fail)?;
    let stats = fit_normalizer(&raw).map_err(|e| fail(e.to_string()))?;
    for w in constant_channel_warnings(&stats) {
        warn!("{w}");
    }
    let ds = apply_normalizer(&raw, &stats).map_err(|e| fail(e.to_string()))?;
    let windows = make_windows(&ds, cfg.obs_len, cfg.pred_len, cfg.stride).map_err(|e| fail(e.to_string()))?;
    let mut model = CpcModel::init(cfg.cpc_config(ds.channels())).map_err(|e| fail(e.to_string()))?;
    let report = train(&mut model, &windows, &cfg.train_config()).map_err(|e| fail(e.to_string()))?;

    let checkpoint = cfg.checkpoint_path();
    let loss_csv = loss_csv_path(&checkpoint);
    write_atomic(&checkpoint, |tmp| save_checkpoint(&model, tmp)).map_err(fail)?;
    write_atomic(&loss_csv, |tmp| report.write_loss_csv(tmp)).map_err(fail)?;

    match (report.step_losses.first(), report.final_epoch_loss()) {
        (Some(first), Some(last)) => {
            println!("step-0 loss: {first:.4} (ln M = {:.4})", (cfg.batch_m as f64).ln());
            println!("final epoch loss: {last:.4}");
        }
        _ => println!("no training steps; checkpoint holds the initialization"),
    }
    println!("checkpoint: {}", checkpoint.display());
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, train_csv: &Path, test_csv: &Path) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let fail = CliError::Eval;
    let checkpoint = cfg.checkpoint_path();
    let model = load_checkpoint(&checkpoint).map_err(|e| fail(format!("{}: {e}", checkpoint.display())))?;
    let raw_train = load(train_csv).map_err(fail)?;
    let raw_test = load(test_csv).map_err(fail)?;
    if raw_test.labels().is_none() {
        return Err(fail(format!("{}: test data has no label column", test_csv.display())));
    }
    let stats = fit_normalizer(&raw_train).map_err(|e| fail(e.to_string()))?;
    let train_ds = apply_normalizer(&raw_train, &stats).map_err(|e| fail(e.to_string()))?;
    let test_ds = apply_normalizer(&raw_test, &stats).map_err(|e| fail(e.to_string()))?;

    let mut report = evaluate(&model, &train_ds, &test_ds, cfg.ridge).map_err(|e| fail(e.to_string()))?;
    report.warnings = constant_channel_warnings(&stats);
    for w in &report.warnings {
        warn!("{w}");
    }
    let path = cfg.report_path();
    write_atomic(&path, |tmp| fs::write(tmp, report.to_json() + "\n")).map_err(fail)?;

    let b = &report.best;
    println!(
        "best F1: {:.4} (precision {:.4}, recall {:.4}, threshold {:.4})",
        b.f1, b.precision, b.recall, b.threshold
    );
    println!("report: {}", path.display());
    Ok(report)
}

pub fn cmd_full(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let data = cmd_synth(cfg)?;
    cmd_train(cfg, &data.train_csv)?;
    let report = cmd_eval(cfg, &data.train_csv, &data.test_csv)?;
    println!("best_f1={:.4}", report.best_f1());
    Ok(report)
}
