use rand::seq::index;
use rand::Rng;

use super::{DataError, MvtsDataset};
use crate::autodiff::Tensor;

/// An observation segment and the prediction segment that immediately
/// follows it in the source series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// `obs_len × m`
    pub observation: Tensor,
    /// `pred_len × m`
    pub prediction: Tensor,
    /// Source row of the first observation timestep.
    pub origin: usize,
    /// Whether any covered timestep is labeled anomalous.
    pub label_any: bool,
}

impl WindowPair {
    pub fn obs_len(&self) -> usize {
        self.observation.rows()
    }

    pub fn pred_len(&self) -> usize {
        self.prediction.rows()
    }

    /// Timesteps covered, observation plus prediction.
    pub fn span(&self) -> usize {
        self.obs_len() + self.pred_len()
    }

    /// True when the two windows share no source timestep.
    pub fn disjoint_from(&self, other: &WindowPair) -> bool {
        self.origin + self.span() <= other.origin || other.origin + other.span() <= self.origin
    }
}

/// Slides a window of `obs_len + pred_len` rows over `ds` with the given
/// stride, starting at row 0.
pub fn make_windows(
    ds: &MvtsDataset,
    obs_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<Vec<WindowPair>, DataError> {
    if obs_len == 0 || pred_len == 0 || stride == 0 {
        return Err(DataError::Invalid(format!(
            "obs_len ({obs_len}), pred_len ({pred_len}) and stride ({stride}) must be ≥ 1"
        )));
    }
    let span = obs_len + pred_len;
    if ds.len() < span {
        return Err(DataError::TooShort {
            required: span,
            got: ds.len(),
        });
    }
    let count = (ds.len() - span) / stride + 1;
    let windows = (0..count)
        .map(|w| {
            let origin = w * stride;
            WindowPair {
                observation: ds.samples().slice_rows(origin, obs_len),
                prediction: ds.samples().slice_rows(origin + obs_len, pred_len),
                origin,
                label_any: ds
                    .labels()
                    .is_some_and(|l| l[origin..origin + span].contains(&1)),
            }
        })
        .collect();
    Ok(windows)
}

/// One observation window and `M` candidate prediction segments, exactly
/// one of which is its true successor.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub observation: Tensor,
    pub candidates: Vec<Tensor>,
    pub positive_index: usize,
    /// Source window origin of each candidate.
    pub candidate_origins: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn size(&self) -> usize {
        self.candidates.len()
    }
}

/// Assembles a batch around `windows[positive]`. The `M − 1` negatives are
/// drawn without replacement from windows sharing no timestep with the
/// positive, and the positive lands at a uniformly random slot.
pub fn make_batch<R: Rng + ?Sized>(
    windows: &[WindowPair],
    positive: usize,
    m: usize,
    rng: &mut R,
) -> Result<ContrastiveBatch, DataError> {
    if m < 2 {
        return Err(DataError::Invalid(format!("batch size M must be ≥ 2, got {m}")));
    }
    let pos = windows.get(positive).ok_or_else(|| {
        DataError::Invalid(format!("positive index {positive} out of {} windows", windows.len()))
    })?;
    let eligible: Vec<usize> = windows
        .iter()
        .enumerate()
        .filter(|(_, w)| w.disjoint_from(pos))
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < m - 1 {
        return Err(DataError::InsufficientNegatives {
            required: m - 1,
            available: eligible.len(),
        });
    }
    let picks = index::sample(rng, eligible.len(), m - 1);
    let positive_index = rng.random_range(0..m);

    let mut candidates = Vec::with_capacity(m);
    let mut candidate_origins = Vec::with_capacity(m);
    let mut negatives = picks.iter().map(|k| &windows[eligible[k]]);
    for slot in 0..m {
        let w = if slot == positive_index {
            pos
        } else {
            negatives.next().expect("m - 1 negatives sampled")
        };
        candidates.push(w.prediction.clone());
        candidate_origins.push(w.origin);
    }
    Ok(ContrastiveBatch {
        observation: pos.observation.clone(),
        candidates,
        positive_index,
        candidate_origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(t: usize) -> MvtsDataset {
        let rows: Vec<[f64; 2]> = (0..t).map(|i| [i as f64, -(i as f64)]).collect();
        MvtsDataset::from_rows(&rows, None).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&ramp(20), 10, 10, 1).unwrap().len(), 1);
        let w = make_windows(&ramp(21), 10, 10, 1).unwrap();
        assert_eq!(w.iter().map(|w| w.origin).collect::<Vec<_>>(), vec![0, 1]);
        // origins 0, 5, …, 80: enumerate and count
        let by_enumeration = (0..100).step_by(5).filter(|o| o + 20 <= 100).count();
        assert_eq!(by_enumeration, 17);
        assert_eq!(make_windows(&ramp(100), 10, 10, 5).unwrap().len(), by_enumeration);
    }

    #[test]
    fn too_short_reports_minimum() {
        match make_windows(&ramp(19), 10, 10, 1) {
            Err(DataError::TooShort { required, got }) => assert_eq!((required, got), (20, 19)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(make_windows(&ramp(30), 0, 10, 1).is_err());
    }

    #[test]
    fn prediction_follows_observation() {
        let ds = ramp(40);
        for w in make_windows(&ds, 4, 3, 2).unwrap() {
            assert_eq!(w.prediction, ds.samples().slice_rows(w.origin + 4, 3));
            assert_eq!(w.observation.row(3)[0] + 1.0, w.prediction.row(0)[0]);
        }
    }

    #[test]
    fn label_any_covers_whole_span() {
        let mut labels = vec![0u8; 30];
        labels[12] = 1;
        let ds = MvtsDataset::from_rows(&vec![[0.0]; 30], Some(labels)).unwrap();
        let w = make_windows(&ds, 5, 3, 1).unwrap();
        assert!(!w[4].label_any);
        assert!(w[5].label_any && w[12].label_any);
        assert!(!w[13].label_any);
    }

    #[test]
    fn minimal_batch_and_errors() {
        let windows = make_windows(&ramp(40), 10, 10, 20).unwrap();
        assert_eq!(windows.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batch(&windows, 0, 2, &mut rng).unwrap();
        assert_eq!(b.size(), 2);
        assert_eq!(b.candidates[b.positive_index], windows[0].prediction);
        assert!(matches!(
            make_batch(&windows, 0, 3, &mut rng),
            Err(DataError::InsufficientNegatives { required: 2, available: 1 })
        ));
        assert!(make_batch(&windows, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn batch_of_eight_is_deterministic() {
        let windows = make_windows(&ramp(400), 10, 10, 1).unwrap();
        let b1 = make_batch(&windows, 100, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b2 = make_batch(&windows, 100, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.candidates.len(), 8);
        let positives = b1
            .candidate_origins
            .iter()
            .filter(|&&o| o == windows[100].origin)
            .count();
        assert_eq!(positives, 1);
        assert_eq!(b1.candidate_origins[b1.positive_index], 100);
    }
}
