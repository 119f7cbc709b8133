//! Binary classification metrics. Label `1` is the positive (spatter) class.

use serde::{Deserialize, Serialize};

use crate::num::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(labels: &[u8], predicted: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(predicted) {
            match (y == 1, p == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn tnr(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn balanced_accuracy(&self) -> f64 {
        (self.tpr() + self.tnr()) / 2.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half. `None` when a
/// class is absent.
pub fn roc_auc<T: Real>(labels: &[u8], scores: &[T]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "labels and scores differ in length");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Mann-Whitney U from mid-ranks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    /// Absent when the evaluated set holds a single class.
    pub roc_auc: Option<f64>,
    pub confusion: Confusion,
}

/// Metrics from spatter probabilities; a record is predicted spatter when its
/// probability exceeds `threshold`.
pub fn report(labels: &[u8], spatter_proba: &[f64], threshold: f64) -> MetricsReport {
    let predicted: Vec<u8> = spatter_proba.iter().map(|&p| u8::from(p > threshold)).collect();
    let confusion = Confusion::from_predictions(labels, &predicted);
    MetricsReport {
        n: labels.len(),
        threshold,
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        balanced_accuracy: confusion.balanced_accuracy(),
        roc_auc: roc_auc(labels, spatter_proba),
        confusion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn auc_hand_case() {
        assert_eq!(roc_auc(&[1, 1, 0, 0], &[0.8, 0.4, 0.6, 0.2]), Some(0.75));
    }

    #[test]
    fn auc_single_class_is_none() {
        assert_eq!(roc_auc(&[1, 1], &[0.2, 0.3]), None);
        let r = report(&[0, 0], &[0.1, 0.7], 0.5);
        assert!(r.roc_auc.is_none());
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn perfect_separation() {
        let r = report(&[1, 1, 0, 0], &[0.9, 0.9, 0.1, 0.1], 0.5);
        assert_eq!((r.accuracy, r.f1, r.balanced_accuracy, r.roc_auc), (1.0, 1.0, 1.0, Some(1.0)));
    }

    #[test]
    fn balanced_accuracy_from_rates() {
        let c = Confusion { tp: 4, fn_: 0, tn: 3, fp: 3 };
        assert_eq!((c.tpr(), c.tnr()), (1.0, 0.5));
        assert_eq!(c.balanced_accuracy(), 0.75);
        assert_eq!(c.f1(), 8.0 / 11.0);
        assert_eq!(c.accuracy(), 0.7);
    }

    #[test]
    fn f32_scores() {
        assert_eq!(roc_auc(&[1, 0, 1, 0], &[0.5f32, 0.5, 0.9, 0.1]), Some(0.875));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(data in prop::collection::vec((0u8..2, 0u8..6), 1..60)) {
            let labels: Vec<u8> = data.iter().map(|d| d.0).collect();
            // coarse scores force ties
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 5.0).collect();
            prop_assert_eq!(roc_auc(&labels, &scores), pairwise_auc(&labels, &scores));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(data in prop::collection::vec((0u8..2, -50i32..50), 2..60)) {
            let labels: Vec<u8> = data.iter().map(|d| d.0).collect();
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 10.0).collect();
            let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
            prop_assert_eq!(roc_auc(&labels, &scores), roc_auc(&labels, &squashed));
        }
    }
}
