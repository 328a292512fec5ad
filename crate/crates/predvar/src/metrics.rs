//! Out-of-distribution detection and generalization metrics: rank-statistic
//! AUROC over variance scores and ensemble-mean accuracy.

use crate::kernel_models::EnsemblePredictions;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score sets must be nonempty")]
    EmptyScores,
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// In-distribution and out-of-distribution per-point variance scores.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub in_label: String,
    pub out_label: String,
}

/// Probability that a uniformly random out-of-distribution score exceeds a
/// uniformly random in-distribution score, ties counted half. Computed with
/// midranks in `O(n log n)`.
pub fn auroc(s: &ScoreSet) -> Result<f64, MetricsError> {
    if s.in_scores.is_empty() || s.out_scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    if s.in_scores.iter().chain(s.out_scores.iter()).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    let n_in = s.in_scores.len();
    let n_out = s.out_scores.len();
    let mut all: Vec<(f64, bool)> = s
        .in_scores
        .iter()
        .map(|&v| (v, false))
        .chain(s.out_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // rank-sum of the out-of-distribution scores with midranks over ties
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j, midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_out += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_out - (n_out * (n_out + 1)) as f64 / 2.0;
    Ok(u / (n_in as f64 * n_out as f64))
}

/// Accuracy of the member-averaged prediction under argmax decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    /// Number of evaluation points where the argmax was tied (broken toward
    /// the lowest class index); nonzero values flag a degenerate ensemble.
    pub ties: usize,
}

/// Argmax over channels of the member-averaged prediction, compared to class
/// labels.
pub fn ensemble_accuracy(preds: &EnsemblePredictions, labels: &[u8]) -> Result<AccuracyReport, MetricsError> {
    if labels.len() != preds.points {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} labels for {} evaluation points",
            labels.len(),
            preds.points
        )));
    }
    let mean = preds.member_mean();
    let mut correct = 0usize;
    let mut ties = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = mean.row(i);
        let mut best = 0usize;
        let mut tied = false;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
                tied = false;
            } else if v == row[best] {
                tied = true;
            }
        }
        if tied {
            ties += 1;
        }
        if best == label as usize {
            correct += 1;
        }
    }
    Ok(AccuracyReport { accuracy: correct as f64 / labels.len() as f64, ties })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (x, y) in a.iter().zip(b) {
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
        sab += (x - ma) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricsError::DimensionMismatch("constant input to pearson".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation (Pearson on midranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    pearson(&midranks(a), &midranks(b))
}

fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite values"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = midrank;
        }
        i = j;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_models::Variant;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn score_set(ins: &[f64], outs: &[f64]) -> ScoreSet {
        ScoreSet {
            in_scores: ins.to_vec(),
            out_scores: outs.to_vec(),
            in_label: "in".into(),
            out_label: "out".into(),
        }
    }

    #[test]
    fn perfect_separation() {
        let s = score_set(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn exact_tie_is_half() {
        let s = score_set(&[0.5], &[0.5]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn interleaved_pairwise_count() {
        // in {1, 3}, out {2, 4}: 3 of 4 ordered pairs have out > in
        let s = score_set(&[1.0, 3.0], &[2.0, 4.0]);
        assert_eq!(auroc(&s).unwrap(), 0.75);
    }

    #[test]
    fn empty_scores_rejected() {
        let s = score_set(&[], &[1.0]);
        assert_eq!(auroc(&s), Err(MetricsError::EmptyScores));
    }

    fn brute_force(ins: &[f64], outs: &[f64]) -> f64 {
        let mut total = 0.0;
        for &o in outs {
            for &i in ins {
                total += if o > i {
                    1.0
                } else if o == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (ins.len() * outs.len()) as f64
    }

    #[test]
    fn rank_implementation_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..200 {
            let n_in = rng.gen_range(1..30);
            let n_out = rng.gen_range(1..30);
            // coarse grid of values forces plenty of ties
            let ins: Vec<f64> = (0..n_in).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
            let outs: Vec<f64> = (0..n_out).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
            let fast = auroc(&score_set(&ins, &outs)).unwrap();
            let slow = brute_force(&ins, &outs);
            assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn invariant_under_increasing_transform_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let outs: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let base = auroc(&score_set(&ins, &outs)).unwrap();
        let warp = |v: f64| (v * 0.7).exp() + 3.0 * v;
        let warped = auroc(&score_set(
            &ins.iter().map(|&v| warp(v)).collect::<Vec<_>>(),
            &outs.iter().map(|&v| warp(v)).collect::<Vec<_>>(),
        ))
        .unwrap();
        assert!((base - warped).abs() < 1e-12);
        let flipped = auroc(&score_set(&outs, &ins)).unwrap();
        assert!((base - (1.0 - flipped)).abs() < 1e-12);
    }

    fn preds_with_means(rows: &[Vec<f64>]) -> EnsemblePredictions {
        let points = rows.len();
        let channels = rows[0].len();
        let mut p = EnsemblePredictions::new(Variant::Gd, 1, points, channels, vec![0]);
        for (i, row) in rows.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                p.set(0, i, k, v);
            }
        }
        p
    }

    #[test]
    fn exact_onehot_predictions_are_perfect() {
        let rows = vec![vec![0.9, -0.1, -0.1], vec![-0.1, 0.9, -0.1]];
        let p = preds_with_means(&rows);
        let rep = ensemble_accuracy(&p, &[0, 1]).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(rep.ties, 0);
    }

    #[test]
    fn opposite_members_tie_flagged_degenerate() {
        let mut p = EnsemblePredictions::new(Variant::Gd, 2, 1, 2, vec![0, 1]);
        p.set(0, 0, 0, 1.0);
        p.set(0, 0, 1, -1.0);
        p.set(1, 0, 0, -1.0);
        p.set(1, 0, 1, 1.0);
        let rep = ensemble_accuracy(&p, &[0]).unwrap();
        assert_eq!(rep.ties, 1);
        // tie broken toward class 0
        assert_eq!(rep.accuracy, 1.0);
    }

    #[test]
    fn synthetic_three_class_margins() {
        let rows = vec![
            vec![0.6, 0.3, 0.1],  // class 0 correct
            vec![0.2, 0.5, 0.3],  // class 1 correct
            vec![0.1, 0.45, 0.45], // tie between 1 and 2, breaks to 1, label 2 wrong
            vec![0.0, 0.2, 0.8],  // class 2 correct
        ];
        let p = preds_with_means(&rows);
        let rep = ensemble_accuracy(&p, &[0, 1, 2, 2]).unwrap();
        assert_eq!(rep.ties, 1);
        assert!((rep.accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let p = preds_with_means(&[vec![1.0, 0.0]]);
        assert!(matches!(ensemble_accuracy(&p, &[0, 1]), Err(MetricsError::DimensionMismatch(_))));
    }

    #[test]
    fn correlation_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        // spearman only needs monotonicity
        let d = [1.0, 10.0, 100.0, 1000.0];
        assert!((spearman(&a, &d).unwrap() - 1.0).abs() < 1e-12);
        let e = [1.0, 3.0, 2.0, 4.0];
        let s = spearman(&a, &e).unwrap();
        assert!(s > 0.5 && s < 1.0, "{s}");
    }
}
