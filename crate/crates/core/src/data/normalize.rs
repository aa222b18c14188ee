use serde::{Deserialize, Serialize};

use super::{DataError, MvtsDataset};
use crate::autodiff::Tensor;

/// Per-channel mean and population standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Channels with zero spread in the training split.
    pub constant: Vec<bool>,
    pub channel_names: Vec<String>,
}

impl NormalizerStats {
    pub fn channels(&self) -> usize {
        self.means.len()
    }

    pub fn constant_channels(&self) -> Vec<&str> {
        self.channel_names
            .iter()
            .zip(&self.constant)
            .filter(|(_, &c)| c)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Fits per-channel statistics on `train`. A channel whose values are all
/// identical gets `std = 0` and is flagged constant.
pub fn fit_normalizer(train: &MvtsDataset) -> Result<NormalizerStats, DataError> {
    let t = train.len();
    if t < 2 {
        return Err(DataError::TooShort { required: 2, got: t });
    }
    let m = train.channels();
    let mut means = vec![0.0; m];
    for row in train.samples().iter_rows() {
        for (acc, v) in means.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for mean in &mut means {
        *mean /= t as f64;
    }
    let mut vars = vec![0.0; m];
    for row in train.samples().iter_rows() {
        for ((acc, v), mean) in vars.iter_mut().zip(row).zip(&means) {
            *acc += (v - mean) * (v - mean);
        }
    }
    let mut stds = Vec::with_capacity(m);
    let mut constant = Vec::with_capacity(m);
    for c in 0..m {
        let first = train.row(0)[c];
        let is_const = train.samples().iter_rows().all(|r| r[c] == first);
        constant.push(is_const);
        stds.push(if is_const { 0.0 } else { (vars[c] / t as f64).sqrt() });
    }
    Ok(NormalizerStats {
        means,
        stds,
        constant,
        channel_names: train.channel_names().to_vec(),
    })
}

/// `(x − mean) / std` per channel. Constant channels are only centered.
pub fn apply_normalizer(ds: &MvtsDataset, stats: &NormalizerStats) -> Result<MvtsDataset, DataError> {
    if stats.channels() != ds.channels() {
        return Err(DataError::ChannelMismatch {
            expected: stats.channels(),
            got: ds.channels(),
        });
    }
    let m = ds.channels();
    let data: Vec<f64> = ds
        .samples()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % m;
            let scale = if stats.constant[c] { 1.0 } else { stats.stds[c] };
            (v - stats.means[c]) / scale
        })
        .collect();
    Ok(ds.with_samples(Tensor::from_parts(vec![ds.len(), m], data)))
}
