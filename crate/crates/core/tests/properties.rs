use std::f64::consts::PI;

use cpc_core::autodiff::{Tape, Tensor};
use cpc_core::data::{apply_normalizer, fit_normalizer, load_csv, make_batch, make_windows, write_csv, CsvOptions, MvtsDataset};
use cpc_core::model::{CpcConfig, CpcModel};
use cpc_core::scorer::{best_row, f1, fit_gaussian, sweep_log_likelihoods, Ridge, SweepRow};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// O(N²) reference: for each observed score, recount the confusion matrix.
fn brute_force_best_f1(scores: &[f64], labels: &[u8]) -> f64 {
    let mut best = 0.0f64;
    for &p in scores {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s <= p, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let f = if tp == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
        if tp > 0 {
            let pr = tp as f64 / (tp + fp) as f64;
            let re = tp as f64 / (tp + fn_) as f64;
            assert!((f - 2.0 * pr * re / (pr + re)).abs() < 1e-15);
        }
        best = best.max(f);
    }
    best
}

fn scored_instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=500).prop_flat_map(|n| {
        (
            // A coarse grid forces ties.
            prop::collection::vec((-40i32..40).prop_map(|v| v as f64 * 0.25), n),
            prop::collection::vec(0u8..=1, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

fn spd(n: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(n, n, entries.iter().copied());
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_gradient_sums_to_one(x in prop::collection::vec(-30.0f64..30.0, 1..16)) {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::vector(x));
        let y = tape.log_sum_exp(v).unwrap();
        let g = tape.backward(y).unwrap();
        let s: f64 = g.get(v).unwrap().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..40),
        seed in any::<u64>(),
    ) {
        let labels: Vec<u8> = (0..rows.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let ds = MvtsDataset::from_rows(&rows, Some(labels)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&ds, &p).unwrap();
        let back = load_csv(&p, &CsvOptions::labeled()).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.samples().data().iter().zip(ds.samples().data()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn windows_follow_source(t in 2usize..120, obs in 1usize..12, pred in 1usize..12, stride in 1usize..7) {
        let rows: Vec<[f64; 2]> = (0..t).map(|i| [i as f64, (i * i) as f64]).collect();
        let ds = MvtsDataset::from_rows(&rows, None).unwrap();
        match make_windows(&ds, obs, pred, stride) {
            Ok(w) => {
                prop_assert_eq!(w.len(), (t - obs - pred) / stride + 1);
                for win in &w {
                    prop_assert_eq!(&win.prediction, &ds.samples().slice_rows(win.origin + obs, pred));
                    prop_assert_eq!(&win.observation, &ds.samples().slice_rows(win.origin, obs));
                }
            }
            Err(_) => prop_assert!(t < obs + pred),
        }
    }

    #[test]
    fn negatives_never_overlap_positive(seed in any::<u64>(), m in 2usize..17, pos in 0usize..1000) {
        let rows: Vec<[f64; 1]> = (0..300).map(|i| [i as f64]).collect();
        let ds = MvtsDataset::from_rows(&rows, None).unwrap();
        let w = make_windows(&ds, 10, 10, 1).unwrap();
        let pos = pos % w.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = make_batch(&w, pos, m, &mut rng).unwrap();
        prop_assert_eq!(b.size(), m);
        prop_assert_eq!(b.candidate_origins[b.positive_index], w[pos].origin);
        for (j, &o) in b.candidate_origins.iter().enumerate() {
            if j != b.positive_index {
                prop_assert!(o + 20 <= w[pos].origin || w[pos].origin + 20 <= o);
            }
        }
        let mut distinct = b.candidate_origins.clone();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), m);
    }

    #[test]
    fn sweep_matches_brute_force((scores, labels) in scored_instance()) {
        let rows = sweep_log_likelihoods(&scores, &labels).unwrap();
        let best = best_row(&rows).unwrap();
        prop_assert_eq!(best.f1, brute_force_best_f1(&scores, &labels));
        // Predicted-positive count never decreases as the threshold rises.
        for pair in rows.windows(2) {
            prop_assert!(pair[0].threshold < pair[1].threshold);
            prop_assert!(pair[0].tp + pair[0].fp < pair[1].tp + pair[1].fp);
        }
        for r in &rows {
            prop_assert_eq!(r.f1, f1(r.tp, r.fp, r.fn_));
            prop_assert!((0.0..=1.0).contains(&r.f1));
        }
    }

    #[test]
    fn sweep_is_permutation_invariant((scores, labels) in scored_instance(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l2: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let a = sweep_log_likelihoods(&scores, &labels).unwrap();
        let b = sweep_log_likelihoods(&s2, &l2).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(best_row(&a), best_row(&b));
    }

    #[test]
    fn cholesky_log_pdf_matches_direct_inverse(
        n in 1usize..=8,
        entries in prop::collection::vec(-1.0f64..1.0, 64),
        z in prop::collection::vec(-3.0f64..3.0, 8),
        seed in any::<u64>(),
    ) {
        // Sample a cloud whose population covariance is the target matrix by
        // construction is awkward; instead fit on random points and compare
        // the fitted scorer with nalgebra evaluating the same μ and Σ.
        use rand::Rng;
        let mix = spd(n, &entries[..n * n]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..(4 * n + 8))
            .map(|_| {
                let u = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..1.0)));
                (&mix * u).iter().copied().collect()
            })
            .collect();
        let g = fit_gaussian(&Tensor::from_rows(&points).unwrap(), Ridge::Fixed(1e-3)).unwrap();
        let sigma = DMatrix::from_row_slice(n, n, &g.covariance);
        let inv = sigma.clone().try_inverse().unwrap();
        let d = DVector::from_iterator(n, (0..n).map(|i| z[i] - g.mean[i]));
        let maha = (d.transpose() * &inv * &d)[(0, 0)];
        let direct = -0.5 * (n as f64 * (2.0 * PI).ln() + sigma.determinant().ln() + maha);
        let ours = g.log_likelihood(&z[..n]).unwrap();
        prop_assert!((ours - direct).abs() <= 1e-9 * direct.abs().max(1.0), "{} vs {}", ours, direct);
    }

    #[test]
    fn normalized_train_has_zero_mean(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 2..60),
    ) {
        let ds = MvtsDataset::from_rows(&rows, None).unwrap();
        let stats = fit_normalizer(&ds).unwrap();
        let z = apply_normalizer(&ds, &stats).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..z.len()).map(|t| z.row(t)[c]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            if !stats.constant[c] {
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn info_nce_ignores_negative_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let rows: Vec<[f64; 3]> = (0..200)
            .map(|i| {
                let t = i as f64;
                [(t * 0.3).sin(), (t * 0.3).cos(), (t * 0.05).sin()]
            })
            .collect();
        let ds = MvtsDataset::from_rows(&rows, None).unwrap();
        let cfg = CpcConfig { horizon: 4, obs_len: 5, ..CpcConfig::for_channels(3) };
        let mut model = CpcModel::init(cfg).unwrap();
        for p in model.params_mut().iter_mut() {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 0.1 * ((i as f64) * 1.7).sin();
            }
        }
        let w = make_windows(&ds, 5, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = make_batch(&w, 100, 8, &mut rng).unwrap();
        let mut shuffled = batch.clone();
        let pos = batch.candidates[batch.positive_index].clone();
        let mut negatives: Vec<Tensor> = batch
            .candidates
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != batch.positive_index)
            .map(|(_, c)| c.clone())
            .collect();
        negatives.shuffle(&mut rng);
        negatives.insert(batch.positive_index, pos);
        shuffled.candidates = negatives;
        let a = model.score_batch(&batch).unwrap().loss;
        let b = model.score_batch(&shuffled).unwrap().loss;
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn gaussian_at_mean_with_identity_covariance() {
    // Points ±√n·e_i have population mean 0 and covariance I exactly.
    for n in 1..=8 {
        let r = (n as f64).sqrt();
        let mut pts = Vec::new();
        for i in 0..n {
            for s in [-r, r] {
                let mut p = vec![0.0; n];
                p[i] = s;
                pts.push(p);
            }
        }
        let g = fit_gaussian(&Tensor::from_rows(&pts).unwrap(), Ridge::Fixed(0.0)).unwrap();
        assert_eq!(g.mean, vec![0.0; n]);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.covariance[i * n + j] - want).abs() < 1e-15);
            }
        }
        let want = -(n as f64 / 2.0) * (2.0 * PI).ln();
        assert!((g.log_likelihood(&vec![0.0; n]).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn sweep_rows_are_serializable() {
    let rows: Vec<SweepRow> = sweep_log_likelihoods(&[0.0, 1.0], &[1, 0]).unwrap();
    let json = serde_json::to_string(&rows).unwrap();
    assert!(json.contains("\"fn\":0"));
}
