//! Gaussian density scoring of encoder latents and the best-F1 threshold sweep.

mod gaussian;
mod sweep;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{DataError, MvtsDataset};
use crate::model::{CpcModel, ModelError};

pub use gaussian::{cholesky, fit_gaussian, GaussianScorer, Ridge};
pub use sweep::{best_row, f1, sweep_log_likelihoods, SweepRow};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Shape(String),
    #[error("need at least {required} latents to fit a Gaussian, got {got}")]
    TooFewSamples { required: usize, got: usize },
    #[error("covariance is not positive definite with ridge {ridge:e}; use a larger ridge")]
    NotPositiveDefinite { ridge: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("test set has no labels")]
    MissingLabels,
    #[error("{}", single_class_message(*positives, *total))]
    SingleClass { positives: usize, total: usize },
}

fn single_class_message(positives: usize, total: usize) -> String {
    if positives == 0 {
        format!("no positive labels among {total} test samples; F1 is undefined")
    } else {
        format!("all {total} test samples are labeled anomalous; F1 needs both classes")
    }
}

/// Per-timestep latents of a dataset, with its labels when present.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    /// `T×n`
    pub latents: Tensor,
    pub labels: Option<Vec<u8>>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encodes every timestep of `ds` on its own.
pub fn collect_latents(model: &CpcModel, ds: &MvtsDataset) -> Result<LatentSet, ScorerError> {
    if ds.channels() != model.config().channels {
        return Err(DataError::ChannelMismatch {
            expected: model.config().channels,
            got: ds.channels(),
        }
        .into());
    }
    Ok(LatentSet {
        latents: model.encode(ds.samples())?,
        labels: ds.labels().map(<[u8]>::to_vec),
    })
}

const THRESHOLD_NOTE: &str = "oracle threshold: best F1 over all test log-likelihood thresholds, \
chosen with test labels; not a deployable operating point";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold_selection: String,
    pub best: SweepRow,
    /// Index of `best` within `rows`.
    pub best_rank: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub test_positives: usize,
    pub latent_dim: usize,
    pub ridge: f64,
    pub warnings: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl EvalReport {
    pub fn best_f1(&self) -> f64 {
        self.best.f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `rank,f1` for each threshold in ascending order.
    pub fn write_f1_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "rank,f1")?;
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(w, "{i},{}", r.f1)?;
        }
        w.flush()
    }
}

/// Sweeps thresholds over the test log-likelihoods and records the best row.
pub fn sweep_thresholds(scorer: &GaussianScorer, test: &LatentSet) -> Result<EvalReport, ScorerError> {
    let labels = test.labels.as_deref().ok_or(ScorerError::MissingLabels)?;
    let scores = scorer.log_likelihoods(&test.latents)?;
    let rows = sweep_log_likelihoods(&scores, labels)?;
    let best_rank = rows
        .iter()
        .position(|r| std::ptr::eq(r, best_row(&rows).expect("sweep yields rows")))
        .expect("best row is in rows");
    Ok(EvalReport {
        threshold_selection: THRESHOLD_NOTE.into(),
        best: rows[best_rank].clone(),
        best_rank,
        train_samples: 0,
        test_samples: scores.len(),
        test_positives: labels.iter().filter(|&&l| l == 1).count(),
        latent_dim: scorer.dim(),
        ridge: scorer.ridge,
        warnings: Vec::new(),
        rows,
    })
}

/// Fits the Gaussian on `train` latents and sweeps on `test`.
pub fn evaluate(
    model: &CpcModel,
    train: &MvtsDataset,
    test: &MvtsDataset,
    ridge: Ridge,
) -> Result<EvalReport, ScorerError> {
    if test.labels().is_none() {
        return Err(ScorerError::MissingLabels);
    }
    let fit = collect_latents(model, train)?;
    let scorer = fit_gaussian(&fit.latents, ridge)?;
    let mut report = sweep_thresholds(&scorer, &collect_latents(model, test)?)?;
    report.train_samples = fit.len();
    Ok(report)
}
