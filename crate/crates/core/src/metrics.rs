//! Binary classification metrics.

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank-sum formulation. Tied scores get
/// average ranks, which credits each tied positive/negative pair 0.5.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::InvalidArgument("auc: labels and scores differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "auc undefined: need at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i..=j] shares the average rank
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Fraction of examples where thresholding the score at 0.5 matches the
/// label. Scores of exactly 0.5 count as positive predictions.
pub fn accuracy(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy: empty or mismatched inputs".into()));
    }
    let hits = labels
        .iter()
        .zip(scores)
        .filter(|(&l, &s)| (s >= 0.5) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of always predicting the most common label.
pub fn majority_accuracy(labels: &[bool]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("majority accuracy of empty set".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok(pos.max(labels.len() - pos) as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct pairwise definition: P(score_pos > score_neg) + 0.5 P(tie).
    fn auc_pairwise(labels: &[bool], scores: &[f64]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for i in 0..labels.len() {
            if !labels[i] {
                continue;
            }
            for j in 0..labels.len() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let labels = [true, true, false, false];
        let scores = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(auc(&labels, &scores).unwrap(), 1.0);
    }

    #[test]
    fn reversed_ranking_scores_zero() {
        let labels = [true, true, false, false];
        let scores = [0.1, 0.2, 0.8, 0.9];
        assert_eq!(auc(&labels, &scores).unwrap(), 0.0);
    }

    #[test]
    fn all_tied_scores_half() {
        let labels = [true, false, true, false, false];
        let scores = [0.5; 5];
        assert_eq!(auc(&labels, &scores).unwrap(), 0.5);
    }

    #[test]
    fn rank_auc_matches_pairwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = 20 + trial % 30;
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            // quantized scores so ties actually occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let fast = auc(&labels, &scores).unwrap();
            let slow = auc_pairwise(&labels, &scores);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[true, true], &[0.1, 0.9]).is_err());
        assert!(auc(&[false], &[0.5]).is_err());
    }

    #[test]
    fn accuracy_threshold_behavior() {
        let labels = [true, false, true, false];
        let scores = [0.7, 0.2, 0.4, 0.5];
        // hits: 0.7>=0.5 vs true, 0.2<0.5 vs false; misses: 0.4 vs true, 0.5 vs false
        assert_eq!(accuracy(&labels, &scores).unwrap(), 0.5);
    }

    #[test]
    fn majority_baseline() {
        assert_eq!(majority_accuracy(&[true, true, false]).unwrap(), 2.0 / 3.0);
        assert_eq!(majority_accuracy(&[false, false, false, true]).unwrap(), 0.75);
    }
}
