//! Multivariate time-series data: ingestion, normalization, windowing and
//! contrastive batch assembly, plus a labeled synthetic generator.

mod csv_io;
mod normalize;
pub mod synth;
mod windows;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use csv_io::{load_csv, write_csv, CsvOptions};
pub use normalize::{apply_normalizer, fit_normalizer, NormalizerStats};
pub use synth::{synth_generate, synth_train_test, AnomalyKind, SynthConfig};
pub use windows::{make_batch, make_windows, ContrastiveBatch, WindowPair};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("row {row}, column {column}: cannot parse {value:?} as a finite number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row} has {got} fields, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("row {row}: label {value:?} is not 0 or 1")]
    Label { row: usize, value: String },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has {got} channels, expected {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("series of length {got} is too short: need at least {required} timesteps")]
    TooShort { required: usize, got: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("need {required} negative windows disjoint from the positive, found {available}")]
    InsufficientNegatives { required: usize, available: usize },
}

/// A `T×m` multivariate series: one row per timestep, one column per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MvtsDataset {
    samples: Tensor,
    labels: Option<Vec<u8>>,
    channel_names: Vec<String>,
    timestamps: Option<Vec<String>>,
    timestep_aggregation: usize,
}

impl MvtsDataset {
    /// Builds a dataset from row-major samples, validating the invariants.
    pub fn new(
        samples: Tensor,
        labels: Option<Vec<u8>>,
        channel_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let (t, m) = match samples.shape() {
            [t, m] => (*t, *m),
            other => return Err(DataError::Invalid(format!("samples must be T×m, got {other:?}"))),
        };
        if t == 0 || m == 0 {
            return Err(DataError::Empty);
        }
        if channel_names.len() != m {
            return Err(DataError::ChannelMismatch {
                expected: m,
                got: channel_names.len(),
            });
        }
        if let Some(pos) = samples.data().iter().position(|v| !v.is_finite()) {
            return Err(DataError::Parse {
                row: pos / m,
                column: channel_names[pos % m].clone(),
                value: samples.data()[pos].to_string(),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != t {
                return Err(DataError::Invalid(format!(
                    "{} labels for {t} timesteps",
                    labels.len()
                )));
            }
            if let Some(row) = labels.iter().position(|&l| l > 1) {
                return Err(DataError::Label {
                    row,
                    value: labels[row].to_string(),
                });
            }
        }
        Ok(Self {
            samples,
            labels,
            channel_names,
            timestamps: None,
            timestep_aggregation: 1,
        })
    }

    /// Dataset with generated channel names `ch0..`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], labels: Option<Vec<u8>>) -> Result<Self, DataError> {
        let samples = Tensor::from_rows(rows).map_err(|e| DataError::Invalid(e.to_string()))?;
        let names = (0..samples.cols()).map(|c| format!("ch{c}")).collect();
        Self::new(samples, labels, names)
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self, DataError> {
        if timestamps.len() != self.len() {
            return Err(DataError::Invalid(format!(
                "{} timestamps for {} timesteps",
                timestamps.len(),
                self.len()
            )));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.cols()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.samples.row(t)
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Raw timestamps represented by one model timestep.
    pub fn timestep_aggregation(&self) -> usize {
        self.timestep_aggregation
    }

    /// Fraction of timesteps labeled anomalous; `None` without labels.
    pub fn anomaly_fraction(&self) -> Option<f64> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&v| v as usize).sum::<usize>() as f64 / l.len() as f64)
    }

    /// Rows `[start, start + len)` as a new dataset.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self, DataError> {
        if start + len > self.len() || len == 0 {
            return Err(DataError::Invalid(format!(
                "slice [{start}, {}) outside series of length {}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            samples: self.samples.slice_rows(start, len),
            labels: self.labels.as_ref().map(|l| l[start..start + len].to_vec()),
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..start + len].to_vec()),
            timestep_aggregation: self.timestep_aggregation,
        })
    }

    pub(crate) fn with_samples(&self, samples: Tensor) -> Self {
        debug_assert_eq!(samples.shape(), self.samples.shape());
        Self {
            samples,
            ..self.clone()
        }
    }

    /// Mean-pools non-overlapping groups of `factor` rows into one timestep.
    /// Labels pool by max; a trailing partial group is dropped, and each
    /// pooled step keeps the timestamp of its first raw row.
    pub fn aggregate(&self, factor: usize) -> Result<Self, DataError> {
        if factor == 0 {
            return Err(DataError::Invalid("aggregation factor must be ≥ 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let steps = self.len() / factor;
        if steps == 0 {
            return Err(DataError::TooShort {
                required: factor,
                got: self.len(),
            });
        }
        let m = self.channels();
        let mut data = Vec::with_capacity(steps * m);
        for s in 0..steps {
            let mut acc = vec![0.0; m];
            for t in s * factor..(s + 1) * factor {
                for (a, v) in acc.iter_mut().zip(self.row(t)) {
                    *a += v;
                }
            }
            data.extend(acc.into_iter().map(|a| a / factor as f64));
        }
        let labels = self.labels.as_ref().map(|l| {
            l.chunks(factor)
                .take(steps)
                .map(|c| *c.iter().max().unwrap())
                .collect()
        });
        let timestamps = self
            .timestamps
            .as_ref()
            .map(|ts| ts.chunks(factor).take(steps).map(|c| c[0].clone()).collect());
        Ok(Self {
            samples: Tensor::from_parts(vec![steps, m], data),
            labels,
            channel_names: self.channel_names.clone(),
            timestamps,
            timestep_aggregation: self.timestep_aggregation * factor,
        })
    }
}
