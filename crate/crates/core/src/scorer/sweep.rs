use serde::{Deserialize, Serialize};

use super::ScorerError;

/// Confusion counts and scores when every sample with log-likelihood
/// `≤ threshold` is called anomalous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall, 0 when there is no true positive.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    2.0 * tp / (2.0 * tp + fp + fn_)
}

fn row(threshold: f64, tp: usize, fp: usize, fn_: usize) -> SweepRow {
    SweepRow {
        threshold,
        tp,
        fp,
        fn_,
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 },
        f1: f1(tp, fp, fn_),
    }
}

/// One row per distinct log-likelihood, ascending. Sorts once and walks tie
/// groups, so the cost is `O(N log N)`.
pub fn sweep_log_likelihoods(scores: &[f64], labels: &[u8]) -> Result<Vec<SweepRow>, ScorerError> {
    if scores.len() != labels.len() {
        return Err(ScorerError::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ScorerError::NonFinite("test log-likelihoods"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(ScorerError::SingleClass {
            positives,
            total: labels.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rows = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let p = scores[order[i]];
        while i < order.len() && scores[order[i]] == p {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        rows.push(row(p, tp, fp, positives - tp));
    }
    Ok(rows)
}

/// First row with the maximal F1.
pub fn best_row(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.f1 >= r.f1 => Some(b),
        _ => Some(r),
    })
}
