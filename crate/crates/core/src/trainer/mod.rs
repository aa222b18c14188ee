//! Joint optimization of encoder, recurrent stack and heads with Adam.

mod adam;
mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batch, DataError, WindowPair};
use crate::model::{CpcModel, ModelError};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, to_bytes, from_bytes, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("optimizer state does not match parameters: {0}")]
    OptimizerState(String),
    #[error("non-finite loss {loss} at step {step}; largest gradient norms: {grad_norms}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        grad_norms: String,
    },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint parameter {name}: {detail}")]
    ShapeDisagreement { name: String, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Candidates per contrastive batch, `M`.
    pub batch_m: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            batch_m: 8,
            steps_per_epoch: 1000,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_m < 2 {
            return Err(TrainError::Config(format!("batch_m must be ≥ 2, got {}", self.batch_m)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every executed step, in order.
    pub step_losses: Vec<f64>,
    pub epoch_mean_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub steps_per_epoch: usize,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_epoch_loss(&self) -> Option<f64> {
        self.epoch_mean_losses.last().copied()
    }

    /// Loss curve as `step,epoch,loss` CSV at full precision.
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,epoch,loss")?;
        for (step, loss) in self.step_losses.iter().enumerate() {
            writeln!(w, "{step},{},{loss}", step / self.steps_per_epoch.max(1))?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    }
}

/// Trains `model` on contrastive batches drawn from `windows`.
///
/// Each step samples a positive window uniformly (with replacement), builds
/// a batch of `M` candidates, backpropagates the InfoNCE loss, applies one
/// Adam update and clears the gradients. The whole run is determined by
/// `cfg.seed`, the windows and the model's initial parameters.
pub fn train(model: &mut CpcModel, windows: &[WindowPair], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let mut report = TrainReport {
        steps_per_epoch: cfg.steps_per_epoch,
        ..TrainReport::default()
    };
    if cfg.epochs == 0 || cfg.steps_per_epoch == 0 {
        if let Some(path) = &cfg.checkpoint_path {
            save_checkpoint(model, path)?;
            report.final_checkpoint = Some(path.clone());
        }
        return Ok(report);
    }
    if windows.is_empty() {
        return Err(DataError::Empty.into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.params());
    model.params_mut().zero_grads();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let positive = rng.random_range(0..windows.len());
            let batch = make_batch(windows, positive, cfg.batch_m, &mut rng)?;
            let loss = model.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(non_finite(model, report.step_losses.len(), loss));
            }
            adam_step(model.params_mut(), &mut state, cfg)?;
            model.params_mut().zero_grads();
            report.step_losses.push(loss);
            sum += loss;
        }
        let mean = sum / cfg.steps_per_epoch as f64;
        report.epoch_mean_losses.push(mean);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        info!("epoch {epoch}: mean loss {mean:.4}");

        if let Some(path) = &cfg.checkpoint_path {
            let last = epoch + 1 == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                save_checkpoint(model, path)?;
                report.final_checkpoint = Some(path.clone());
            }
        }
    }
    Ok(report)
}

fn non_finite(model: &CpcModel, step: usize, loss: f64) -> TrainError {
    let mut norms = model.params().grad_norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let grad_norms = norms
        .iter()
        .take(5)
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ");
    TrainError::NonFiniteLoss {
        step,
        loss,
        grad_norms,
    }
}
