use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ScorerError;
use crate::autodiff::Tensor;

/// Diagonal loading added to the fitted covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    /// `1e-6 · trace(Σ) / n`, floored at `1e-12`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Ridge {
    const AUTO_FACTOR: f64 = 1e-6;
    const FLOOR: f64 = 1e-12;

    fn resolve(self, trace: f64, n: usize) -> f64 {
        match self {
            Ridge::Auto => (Self::AUTO_FACTOR * trace / n as f64).max(Self::FLOOR),
            Ridge::Fixed(r) => r,
        }
    }
}

/// Multivariate normal fitted to a latent cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianScorer {
    pub mean: Vec<f64>,
    /// Row-major `n×n`, ridge included.
    pub covariance: Vec<f64>,
    pub ridge: f64,
    /// Lower-triangular `L` with `LLᵀ = Σ`.
    cholesky: Vec<f64>,
    log_det: f64,
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Fits mean and population covariance (divide by `N`) of the rows of
/// `latents`, then adds `ridge·I`.
///
/// Sums are taken over sorted terms, so the result is bit-identical under
/// any permutation of the rows.
pub fn fit_gaussian(latents: &Tensor, ridge: Ridge) -> Result<GaussianScorer, ScorerError> {
    let (count, n) = latents.dims2().ok_or(ScorerError::Shape("latents must be 2-D".into()))?;
    if n == 0 {
        return Err(ScorerError::Shape("latent dimension is 0".into()));
    }
    if count < n + 1 {
        return Err(ScorerError::TooFewSamples { required: n + 1, got: count });
    }
    if !latents.all_finite() {
        return Err(ScorerError::NonFinite("training latents"));
    }
    if let Ridge::Fixed(r) = ridge {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(ScorerError::Shape(format!("ridge must be finite and ≥ 0, got {r}")));
        }
    }

    let mut buf = vec![0.0; count];
    let mean: Vec<f64> = (0..n)
        .map(|c| {
            for (b, row) in buf.iter_mut().zip(latents.iter_rows()) {
                *b = row[c];
            }
            order_free_sum(&mut buf) / count as f64
        })
        .collect();
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            for (b, row) in buf.iter_mut().zip(latents.iter_rows()) {
                *b = (row[i] - mean[i]) * (row[j] - mean[j]);
            }
            let v = order_free_sum(&mut buf) / count as f64;
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
    }
    let trace: f64 = (0..n).map(|i| cov[i * n + i]).sum();
    let ridge = ridge.resolve(trace, n);
    for i in 0..n {
        cov[i * n + i] += ridge;
    }
    let cholesky = cholesky(&cov, n).ok_or(ScorerError::NotPositiveDefinite { ridge })?;
    let log_det = 2.0 * (0..n).map(|i| cholesky[i * n + i].ln()).sum::<f64>();
    Ok(GaussianScorer {
        mean,
        covariance: cov,
        ridge,
        cholesky,
        log_det,
    })
}

/// Cholesky–Banachiewicz factorization of a symmetric `n×n` matrix. `None`
/// when a pivot is not strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0 && d.is_finite()) {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

impl GaussianScorer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `log N(z; μ, Σ)`, with the Mahalanobis term from a forward solve
    /// against the Cholesky factor.
    pub fn log_likelihood(&self, z: &[f64]) -> Result<f64, ScorerError> {
        let n = self.dim();
        if z.len() != n {
            return Err(ScorerError::Shape(format!(
                "latent has {} components, scorer expects {n}",
                z.len()
            )));
        }
        let l = &self.cholesky;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (z[i] - self.mean[i] - s) / l[i * n + i];
        }
        let maha: f64 = y.iter().map(|v| v * v).sum();
        Ok(-0.5 * (n as f64 * (2.0 * PI).ln() + self.log_det + maha))
    }

    /// Log-likelihood of every row.
    pub fn log_likelihoods(&self, latents: &Tensor) -> Result<Vec<f64>, ScorerError> {
        latents.iter_rows().map(|z| self.log_likelihood(z)).collect()
    }
}
