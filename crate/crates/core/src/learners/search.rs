//! Stratified k-fold cross-validation and exhaustive grid search on ROC-AUC.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit, Algorithm, HyperParams, HyperValue, ModelSpec};
use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::io_util::{csv_text, fmt_f64};
use crate::metrics;

/// Hyperparameter name to candidate values.
pub type Grid = BTreeMap<String, Vec<HyperValue>>;

/// Validation folds as sorted row indices. Each class is shuffled under
/// `seed`, the classes are concatenated (melt pool first) and position `t`
/// goes to fold `t mod k`.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::InvalidParameter(format!("{} records cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for class in [Label::Meltpool, Label::Spatter] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (t, i) in order.into_iter().enumerate() {
        folds[t % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Grid points in lexicographic order of sorted names, the last name
/// varying fastest and values in declared order.
pub fn enumerate_grid(grid: &Grid) -> Result<Vec<HyperParams>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("grid has no hyperparameters".into()));
    }
    if let Some((k, _)) = grid.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidParameter(format!("grid lists no values for `{k}`")));
    }
    let mut points: Vec<HyperParams> = vec![BTreeMap::new()];
    for (name, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(name.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub params: HyperParams,
    /// Validation AUC per fold; `None` for a single-class fold.
    pub fold_scores: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_index: usize,
    pub best: ModelSpec,
    pub table: Vec<CvRow>,
}

fn is_prefix_family(alg: Algorithm) -> bool {
    matches!(alg, Algorithm::Forest | Algorithm::ExtraTrees | Algorithm::Bagging | Algorithm::GBoost)
}

/// Exhaustive search maximizing mean validation ROC-AUC over stratified
/// folds shared by all grid points; ties go to the earliest grid point.
///
/// Candidates of an ensemble family that differ only in `n_estimators` are
/// scored from prefixes of one fit with the largest count. Member `t` is
/// grown from its own seeded stream, so every prefix is identical to a
/// separately trained model.
pub fn grid_search(base: &ModelSpec, grid: &Grid, train: &Dataset, k: usize, seed: u64) -> Result<SearchResult> {
    let points = enumerate_grid(grid)?;
    let specs: Vec<ModelSpec> = points
        .iter()
        .map(|p| {
            let mut s = base.clone();
            s.hyperparameters.extend(p.clone());
            s
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    let folds = stratified_kfold(&train.labels, k, seed)?;

    // group candidates sharing everything but n_estimators
    let mut groups: Vec<(ModelSpec, Vec<(usize, Option<usize>)>)> = Vec::new();
    for (ci, s) in specs.iter().enumerate() {
        let prefix = is_prefix_family(s.algorithm);
        let count = s.validate()?.n_members();
        let mut key = s.clone();
        if prefix {
            key.hyperparameters.remove("n_estimators");
        }
        match groups.iter_mut().find(|(g, _)| prefix && *g == key) {
            Some((_, members)) => members.push((ci, count)),
            None => groups.push((key, vec![(ci, count)])),
        }
    }

    let units: Vec<(usize, usize)> = (0..groups.len()).flat_map(|g| (0..k).map(move |f| (g, f))).collect();
    let scores: Vec<Result<Vec<(usize, Option<f64>)>>> = units
        .par_iter()
        .map(|&(g, f)| {
            let (key, members) = &groups[g];
            let valid = &folds[f];
            let mut in_valid = vec![false; train.n_rows()];
            valid.iter().for_each(|&i| in_valid[i] = true);
            let train_idx: Vec<usize> = (0..train.n_rows()).filter(|&i| !in_valid[i]).collect();
            let fold_train = train.subset(&train_idx);
            let fold_valid = train.subset(valid);
            let labels = fold_valid.targets();
            let mut spec = key.clone();
            let counts: Vec<usize> = members.iter().filter_map(|m| m.1).collect();
            if let Some(&max) = counts.iter().max() {
                if is_prefix_family(spec.algorithm) {
                    spec.hyperparameters.insert("n_estimators".into(), HyperValue::Int(max as i64));
                }
            }
            let model = fit(&spec, &fold_train).map_err(|e| e.context(format!("grid search fold {}", f + 1)))?;
            if is_prefix_family(spec.algorithm) {
                let probs = model.predict_prefixes(&fold_valid.features, &counts);
                Ok(members.iter().zip(probs).map(|(m, p)| (m.0, metrics::roc_auc(&labels, &p))).collect())
            } else {
                let p = model.predict_rows(&fold_valid.features);
                Ok(vec![(members[0].0, metrics::roc_auc(&labels, &p))])
            }
        })
        .collect();

    let mut fold_scores = vec![vec![None; k]; specs.len()];
    for ((_, f), res) in units.iter().zip(scores) {
        for (ci, s) in res? {
            fold_scores[ci][*f] = s;
        }
    }
    let table: Vec<CvRow> = points
        .into_iter()
        .zip(fold_scores)
        .map(|(params, fs)| {
            let valid: Vec<f64> = fs.iter().flatten().copied().collect();
            let (mean, std) = if valid.is_empty() {
                (None, None)
            } else {
                let m = valid.iter().sum::<f64>() / valid.len() as f64;
                let v = valid.iter().map(|x| (x - m).powi(2)).sum::<f64>() / valid.len() as f64;
                (Some(m), Some(v.sqrt()))
            };
            CvRow { params, fold_scores: fs, mean, std }
        })
        .collect();
    let mut best_index = 0;
    for (i, row) in table.iter().enumerate() {
        let better = match (row.mean, table[best_index].mean) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best_index = i;
        }
    }
    Ok(SearchResult { best_index, best: specs[best_index].clone(), table })
}

/// CSV with one column per grid hyperparameter, then mean/std AUC and
/// per-fold scores (`nan` marks a single-class fold).
pub fn cv_table_csv(result: &SearchResult) -> String {
    let names: Vec<String> = result.table.first().map(|r| r.params.keys().cloned().collect()).unwrap_or_default();
    let k = result.table.first().map_or(0, |r| r.fold_scores.len());
    let fold_cols: Vec<String> = (1..=k).map(|f| format!("fold_{f}")).collect();
    let mut header: Vec<&str> = vec!["index"];
    header.extend(names.iter().map(|s| s.as_str()));
    header.extend(["mean_roc_auc", "std_roc_auc", "best"]);
    header.extend(fold_cols.iter().map(|s| s.as_str()));
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_f64);
    csv_text(
        &header,
        result.table.iter().enumerate().map(|(i, row)| {
            let mut cells = vec![i.to_string()];
            cells.extend(names.iter().map(|n| match &row.params[n] {
                HyperValue::Float(v) => fmt_f64(*v),
                other => other.to_string(),
            }));
            cells.push(opt(row.mean));
            cells.push(opt(row.std));
            cells.push(u8::from(i == result.best_index).to_string());
            cells.extend(row.fold_scores.iter().map(|s| opt(*s)));
            cells
        }),
    )
}

fn ints(range: impl Iterator<Item = i64>) -> Vec<HyperValue> {
    range.map(HyperValue::Int).collect()
}

fn strs(values: &[&str]) -> Vec<HyperValue> {
    values.iter().map(|&s| HyperValue::from(s)).collect()
}

/// Published search spaces: base spec plus grid for each algorithm. The
/// bagging model uses fixed settings, expressed as a one-point grid.
pub fn table2_grid(alg: Algorithm) -> Result<(ModelSpec, Grid)> {
    let mut grid = Grid::new();
    let mut base = ModelSpec::new(alg);
    match alg {
        Algorithm::Forest => {
            base = base.with("criterion", "entropy");
            grid.insert("n_estimators".into(), ints(1..100));
            grid.insert("max_depth".into(), ints(3..12));
            grid.insert("max_features".into(), strs(&["sqrt"]));
        }
        Algorithm::GBoost => {
            grid.insert("n_estimators".into(), ints((50..200).step_by(50)));
            grid.insert("learning_rate".into(), vec![0.01.into(), 0.1.into(), 0.2.into()]);
            grid.insert("max_depth".into(), ints(3..6));
            grid.insert("min_samples_split".into(), ints([2, 5, 10].into_iter()));
            grid.insert("min_samples_leaf".into(), ints([1, 3, 5].into_iter()));
        }
        Algorithm::Bagging => {
            base = base.with("max_samples", 0.8).with("max_features", 0.8).with("bootstrap", true);
            grid.insert("n_estimators".into(), ints(std::iter::once(10)));
        }
        Algorithm::ExtraTrees => {
            grid.insert("n_estimators".into(), ints((10..100).step_by(10)));
            grid.insert("max_depth".into(), ints(3..10));
            grid.insert("max_features".into(), strs(&["sqrt", "log2", "all"]));
            grid.insert("criterion".into(), strs(&["gini", "entropy"]));
        }
        Algorithm::Knn => {
            grid.insert("n_neighbors".into(), ints(1..100));
            grid.insert("weights".into(), strs(&["uniform", "distance"]));
            grid.insert("minkowski_p".into(), ints(1..3));
        }
        Algorithm::Tree => {
            return Err(Error::Unsupported("no published grid for a single decision tree".into()));
        }
    }
    Ok((base, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::tests::table;
    use rand::Rng;

    fn labels(n0: usize, n1: usize) -> Vec<Label> {
        let mut v = vec![Label::Meltpool; n0];
        v.extend(vec![Label::Spatter; n1]);
        v
    }

    fn noisy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u8;
            x.push(c as f64 + rng.random::<f64>() * 1.5);
            x.push(rng.random::<f64>());
            y.push(c);
        }
        table(&x, 2, &y, &["a", "b"])
    }

    #[test]
    fn fold_sizes_for_341_records() {
        let folds = stratified_kfold(&labels(171, 170), 5, 42).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![69, 68, 68, 68, 68]);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..341).collect::<Vec<_>>());
        for f in &folds {
            let s = f.iter().filter(|&&i| i >= 171).count();
            assert!(s.abs_diff(f.len() - s) <= 1);
        }
    }

    #[test]
    fn grid_order_is_lexicographic() {
        let mut g = Grid::new();
        g.insert("b".into(), ints(1..3));
        g.insert("a".into(), strs(&["x", "y"]));
        let pts = enumerate_grid(&g).unwrap();
        let flat: Vec<String> = pts.iter().map(|p| format!("{}{}", p["a"], p["b"])).collect();
        assert_eq!(flat, ["x1", "x2", "y1", "y2"]);
        assert!(enumerate_grid(&Grid::new()).is_err());
    }

    #[test]
    fn table2_rf_grid_has_891_points() {
        let (base, grid) = table2_grid(Algorithm::Forest).unwrap();
        assert_eq!(enumerate_grid(&grid).unwrap().len(), 99 * 9);
        assert_eq!(base.hyperparameters["criterion"], HyperValue::from("entropy"));
        assert_eq!(enumerate_grid(&table2_grid(Algorithm::GBoost).unwrap().1).unwrap().len(), 243);
        assert_eq!(enumerate_grid(&table2_grid(Algorithm::ExtraTrees).unwrap().1).unwrap().len(), 9 * 7 * 3 * 2);
        assert_eq!(enumerate_grid(&table2_grid(Algorithm::Knn).unwrap().1).unwrap().len(), 99 * 2 * 2);
    }

    #[test]
    fn single_point_grid_returns_that_point() {
        let ds = noisy(60, 1);
        let mut g = Grid::new();
        g.insert("max_depth".into(), ints(std::iter::once(2)));
        let r = grid_search(&ModelSpec::new(Algorithm::Tree), &g, &ds, 5, 0).unwrap();
        assert_eq!(r.best_index, 0);
        assert_eq!(r.best.hyperparameters["max_depth"], HyperValue::Int(2));
        assert!(r.table[0].mean.is_some());
    }

    /// Independent re-scoring of every candidate without prefix sharing.
    fn naive_scores(base: &ModelSpec, grid: &Grid, ds: &Dataset, k: usize, seed: u64) -> Vec<Vec<Option<f64>>> {
        let folds = stratified_kfold(&ds.labels, k, seed).unwrap();
        enumerate_grid(grid)
            .unwrap()
            .into_iter()
            .map(|p| {
                let mut s = base.clone();
                s.hyperparameters.extend(p);
                folds
                    .iter()
                    .map(|v| {
                        let tr: Vec<usize> = (0..ds.n_rows()).filter(|i| !v.contains(i)).collect();
                        let m = fit(&s, &ds.subset(&tr)).unwrap();
                        let va = ds.subset(v);
                        metrics::roc_auc(&va.targets(), &m.predict_spatter(&va).unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn prefix_sharing_matches_independent_fits() {
        let ds = noisy(80, 2);
        for alg in [Algorithm::Forest, Algorithm::GBoost, Algorithm::ExtraTrees] {
            let mut g = Grid::new();
            g.insert("n_estimators".into(), ints([3, 1, 5].into_iter()));
            g.insert("max_depth".into(), ints(1..3));
            let base = ModelSpec::new(alg).seed(7);
            let r = grid_search(&base, &g, &ds, 4, 3).unwrap();
            let got: Vec<Vec<Option<f64>>> = r.table.iter().map(|row| row.fold_scores.clone()).collect();
            assert_eq!(got, naive_scores(&base, &g, &ds, 4, 3), "{alg:?}");
        }
    }

    #[test]
    fn search_is_thread_count_independent() {
        let ds = noisy(60, 3);
        let (base, mut grid) = table2_grid(Algorithm::Forest).unwrap();
        grid.insert("n_estimators".into(), ints(1..6));
        grid.insert("max_depth".into(), ints(3..5));
        let run = |t| {
            rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| grid_search(&base, &grid, &ds, 5, 1).unwrap())
        };
        let a = run(1);
        assert_eq!(a, run(3));
        assert_eq!(cv_table_csv(&a), cv_table_csv(&run(2)));
    }

    #[test]
    fn single_class_fold_is_flagged() {
        // 2 spatter rows among 10 with k = 5: three validation folds hold only melt pool
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let ds = table(&x, 1, &y, &["a"]);
        let mut g = Grid::new();
        g.insert("max_depth".into(), ints(std::iter::once(1)));
        let r = grid_search(&ModelSpec::new(Algorithm::Tree), &g, &ds, 5, 0).unwrap();
        let row = &r.table[0];
        assert_eq!(row.fold_scores.iter().filter(|s| s.is_none()).count(), 3);
        assert!(row.mean.is_some());
        assert!(cv_table_csv(&r).contains("nan"));
    }
}
