//! Impurity-based and permutation feature importances.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{member_rng, Fitted, TrainedModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    RocAuc,
}

impl Metric {
    /// Score of spatter probabilities against label codes; AUC falls back
    /// to `NaN` when a class is absent.
    pub fn score(self, labels: &[u8], proba: &[f64]) -> f64 {
        match self {
            Metric::Accuracy => metrics::report(labels, proba, 0.5).accuracy,
            Metric::RocAuc => metrics::roc_auc(labels, proba).unwrap_or(f64::NAN),
        }
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 { v.iter().map(|x| x / s).collect() } else { vec![0.0; v.len()] }
}

/// Mean impurity decrease per feature, normalized to sum to 1 (all zeros
/// when no member ever split).
pub fn feature_importance(model: &TrainedModel) -> Result<Vec<(String, f64)>> {
    let d = model.n_features();
    let raw = match &model.fitted {
        Fitted::Trees { trees } => {
            let mut acc = vec![0.0; d];
            for t in trees {
                for (a, v) in acc.iter_mut().zip(normalized(&t.importances)) {
                    *a += v;
                }
            }
            acc
        }
        Fitted::Boosted { stages, .. } => {
            let mut acc = vec![0.0; d];
            for t in stages {
                for (a, v) in acc.iter_mut().zip(&t.importances) {
                    *a += v;
                }
            }
            acc
        }
        Fitted::Neighbors { .. } => {
            return Err(Error::Unsupported(
                "knn has no impurity importances; use permutation importance instead".into(),
            ))
        }
    };
    Ok(model.feature_names.iter().cloned().zip(normalized(&raw)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationImportance {
    pub feature: String,
    pub mean: f64,
    pub std: f64,
    pub drops: Vec<f64>,
}

/// Drop in `metric` when one column at a time is shuffled; repeat `r` of
/// feature `j` uses stream `j * n_repeats + r` of `seed`.
pub fn permutation_importance(
    model: &TrainedModel,
    ds: &Dataset,
    n_repeats: usize,
    seed: u64,
    metric: Metric,
) -> Result<Vec<PermutationImportance>> {
    model.check_features(&ds.feature_names)?;
    if ds.is_empty() || n_repeats == 0 {
        return Err(Error::InvalidParameter("permutation importance needs records and n_repeats >= 1".into()));
    }
    let labels = ds.targets();
    let base = metric.score(&labels, &model.predict_rows(&ds.features));
    let d = ds.n_features();
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let mut drops = Vec::with_capacity(n_repeats);
        for r in 0..n_repeats {
            let mut rng = member_rng(seed, (j * n_repeats + r) as u64);
            let mut col = ds.column(j);
            col.shuffle(&mut rng);
            let mut x = ds.features.clone();
            for (i, v) in col.into_iter().enumerate() {
                x[i * d + j] = v;
            }
            drops.push(base - metric.score(&labels, &model.predict_rows(&x)));
        }
        let mean = drops.iter().sum::<f64>() / n_repeats as f64;
        let std = (drops.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_repeats as f64).sqrt();
        out.push(PermutationImportance { feature: ds.feature_names[j].clone(), mean, std, drops });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::tests::table;
    use crate::learners::{fit, Algorithm, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn importances_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            x.extend_from_slice(&[a, b]);
            y.push(u8::from(a + 0.3 * b > 0.6));
        }
        let ds = table(&x, 2, &y, &["a", "b"]);
        for alg in [Algorithm::Tree, Algorithm::Forest, Algorithm::ExtraTrees, Algorithm::Bagging, Algorithm::GBoost] {
            let m = fit(&ModelSpec::new(alg).seed(4), &ds).unwrap();
            let imp = feature_importance(&m).unwrap();
            let s: f64 = imp.iter().map(|p| p.1).sum();
            assert!((s - 1.0).abs() < 1e-9, "{alg:?} {s}");
            // bagging members may see only one of the two columns
            if alg != Algorithm::Bagging {
                assert!(imp[0].1 > imp[1].1, "{alg:?} {imp:?}");
            }
        }
        let knn = fit(&ModelSpec::new(Algorithm::Knn), &ds).unwrap();
        assert!(matches!(feature_importance(&knn), Err(Error::Unsupported(_))));
    }

    #[test]
    fn noise_feature_gets_little_impurity_importance() {
        // repeated over seeds: the noise column should stay below 0.05
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..300 {
                let label = (i % 2) as u8;
                let side = if label == 1 { 2.0 } else { -2.0 };
                for _ in 0..3 {
                    x.push(side + rng.random::<f64>() * 0.5);
                }
                x.push(rng.random::<f64>());
                y.push(label);
            }
            let ds = table(&x, 4, &y, &["s1", "s2", "s3", "noise"]);
            let m = fit(&ModelSpec::new(Algorithm::Forest).with("n_estimators", 30i64).seed(seed), &ds).unwrap();
            let imp = feature_importance(&m).unwrap();
            assert!(imp[3].1 < 0.05, "{imp:?}");
        }
    }

    #[test]
    fn permuting_the_only_feature_drops_to_chance() {
        let n = 2000;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<u8> = (0..n).map(|i| u8::from(i >= n / 2)).collect();
        let ds = table(&x, 1, &y, &["a"]);
        let m = fit(&ModelSpec::new(Algorithm::Tree).with("max_depth", 1i64), &ds).unwrap();
        let base = Metric::Accuracy.score(&y, &m.predict_rows(&x));
        assert_eq!(base, 1.0);
        let pi = permutation_importance(&m, &ds, 5, 9, Metric::Accuracy).unwrap();
        assert!((pi[0].mean - (base - 0.5)).abs() < 0.03, "{pi:?}");
        // recompute the first repeat directly
        let mut rng = member_rng(9, 0);
        let mut col = x.clone();
        col.shuffle(&mut rng);
        assert_eq!(pi[0].drops[0], base - Metric::Accuracy.score(&y, &m.predict_rows(&col)));
    }
}
