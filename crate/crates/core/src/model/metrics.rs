use serde::{Deserialize, Serialize};

use crate::diff::row_softmax;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    RocAuc,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(logits: &Matrix, labels: &[usize], mask: &[usize], metric: Metric) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty mask"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "evaluate",
            format!("{} labels", logits.rows()),
            labels.len().to_string(),
        ));
    }
    match metric {
        Metric::Accuracy => {
            let hits = mask
                .iter()
                .filter(|&&i| argmax(logits.row(i)) == labels[i])
                .count();
            Ok(hits as f64 / mask.len() as f64)
        }
        Metric::RocAuc => {
            if logits.cols() != 2 {
                return Err(Error::invalid(format!(
                    "ROC-AUC needs 2 classes, logits have {}",
                    logits.cols()
                )));
            }
            let probs = row_softmax(logits);
            let scores: Vec<f64> = mask.iter().map(|&i| probs[(i, 1)]).collect();
            let ys: Vec<bool> = mask.iter().map(|&i| labels[i] == 1).collect();
            roc_auc(&scores, &ys)
        }
    }
}

/// Mann–Whitney statistic with average ranks, so each tied
/// positive/negative pair contributes one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "ROC-AUC is undefined when the mask holds a single class",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Mean negative log-likelihood over `mask`, evaluated off-tape.
pub fn masked_nll(logits: &Matrix, labels: &[usize], mask: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in mask {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / mask.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_three_of_four() {
        let logits = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let acc = evaluate(&logits, &[0, 1, 0, 0], &[0, 1, 2, 3], Metric::Accuracy).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn auc_perfect_and_constant() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.3; 6], &[false, true, false, true, true, false]).unwrap(),
            0.5
        );
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    }

    #[test]
    fn auc_via_logits() {
        let logits = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0], [1.0, 0.0], [0.0, 3.0]]);
        let auc = evaluate(&logits, &[0, 1, 0, 1], &[0, 1, 2, 3], Metric::RocAuc).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_rejects_single_class() {
        let logits = Matrix::zeros(3, 2);
        assert!(evaluate(&logits, &[1, 1, 1], &[0, 1, 2], Metric::RocAuc).is_err());
        assert!(evaluate(&logits, &[1, 1, 1], &[], Metric::Accuracy).is_err());
    }

    proptest! {
        // Independent quadratic oracle: count ordered pairs directly.
        #[test]
        fn auc_matches_pair_count(data in proptest::collection::vec((0u8..5, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s)).collect();
            let ys: Vec<bool> = data.iter().map(|(_, y)| *y).collect();
            let (np, nn) = (ys.iter().filter(|&&y| y).count(), ys.iter().filter(|&&y| !y).count());
            prop_assume!(np > 0 && nn > 0);
            let mut wins = 0.0;
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if ys[i] && !ys[j] {
                        wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            let want = wins / (np * nn) as f64;
            prop_assert!((roc_auc(&scores, &ys).unwrap() - want).abs() < 1e-12);
        }
    }
}
