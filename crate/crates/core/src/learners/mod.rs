//! Tree ensembles, gradient boosting and nearest neighbors for the
//! spatter / melt-pool classification task.

pub mod importance;
pub mod search;
pub mod tree;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
pub use tree::{Columns, Criterion, MaxFeatures, Node, Splitter, Tree, TreeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Tree,
    Forest,
    ExtraTrees,
    Bagging,
    GBoost,
    Knn,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Tree => "tree",
            Algorithm::Forest => "forest",
            Algorithm::ExtraTrees => "extratrees",
            Algorithm::Bagging => "bagging",
            Algorithm::GBoost => "gboost",
            Algorithm::Knn => "knn",
        }
    }

    fn allowed_keys(self) -> &'static [&'static str] {
        const TREE: &[&str] = &["criterion", "max_depth", "max_features", "min_samples_leaf", "min_samples_split"];
        match self {
            Algorithm::Tree => TREE,
            Algorithm::Forest | Algorithm::ExtraTrees => &[
                "bootstrap",
                "criterion",
                "max_depth",
                "max_features",
                "min_samples_leaf",
                "min_samples_split",
                "n_estimators",
            ],
            Algorithm::Bagging => &[
                "base_max_features",
                "bootstrap",
                "criterion",
                "max_depth",
                "max_features",
                "max_samples",
                "min_samples_leaf",
                "min_samples_split",
                "n_estimators",
            ],
            Algorithm::GBoost => &[
                "learning_rate",
                "max_depth",
                "max_features",
                "min_samples_leaf",
                "min_samples_split",
                "n_estimators",
                "subsample",
            ],
            Algorithm::Knn => &["minkowski_p", "n_neighbors", "weights"],
        }
    }
}

/// A hyperparameter value as written in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl std::fmt::Display for HyperValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HyperValue::Null => write!(f, "none"),
            HyperValue::Bool(b) => write!(f, "{b}"),
            HyperValue::Int(i) => write!(f, "{i}"),
            HyperValue::Float(x) => write!(f, "{x}"),
            HyperValue::Str(s) => write!(f, "{s}"),
        }
    }
}

impl From<i64> for HyperValue {
    fn from(v: i64) -> Self {
        HyperValue::Int(v)
    }
}

impl From<f64> for HyperValue {
    fn from(v: f64) -> Self {
        HyperValue::Float(v)
    }
}

impl From<&str> for HyperValue {
    fn from(v: &str) -> Self {
        HyperValue::Str(v.to_string())
    }
}

impl From<bool> for HyperValue {
    fn from(v: bool) -> Self {
        HyperValue::Bool(v)
    }
}

pub type HyperParams = BTreeMap<String, HyperValue>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    #[default]
    None,
    Standardize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    Uniform,
    Distance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub hyperparameters: HyperParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scaling: Scaling,
}

impl ModelSpec {
    pub fn new(algorithm: Algorithm) -> Self {
        ModelSpec { algorithm, hyperparameters: BTreeMap::new(), seed: 0, scaling: Scaling::None }
    }

    pub fn with(mut self, key: &str, value: impl Into<HyperValue>) -> Self {
        self.hyperparameters.insert(key.to_string(), value.into());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<Resolved> {
        Resolved::from_spec(self)
    }
}

/// Row sampling per ensemble member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowDraw {
    pub fraction: f64,
    pub replace: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleParams {
    pub n_estimators: usize,
    /// `None` trains every member on all rows.
    pub rows: Option<RowDraw>,
    /// Per-member feature subset (bagging); `None` keeps all features.
    pub member_features: Option<MaxFeatures>,
    pub tree: TreeParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoostParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub tree: TreeParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnnParams {
    pub n_neighbors: usize,
    pub weights: Weights,
    pub minkowski_p: f64,
}

/// Typed, validated hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Resolved {
    Tree(TreeParams),
    Ensemble(EnsembleParams),
    Boost(BoostParams),
    Knn(KnnParams),
}

struct Reader<'a> {
    alg: Algorithm,
    map: &'a HyperParams,
}

impl Reader<'_> {
    fn bad(&self, key: &str, want: &str) -> Error {
        Error::InvalidParameter(format!(
            "{}: hyperparameter `{key}` must be {want}, got {}",
            self.alg.name(),
            self.map[key]
        ))
    }

    fn count(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(HyperValue::Int(v)) if *v >= 1 => Ok(*v as usize),
            Some(_) => Err(self.bad(key, "a positive integer")),
        }
    }

    fn depth(&self, default: Option<usize>) -> Result<Option<usize>> {
        match self.map.get("max_depth") {
            None => Ok(default),
            Some(HyperValue::Null) => Ok(None),
            Some(HyperValue::Str(s)) if s == "none" => Ok(None),
            Some(HyperValue::Int(v)) if *v >= 1 => Ok(Some(*v as usize)),
            Some(_) => Err(self.bad("max_depth", "a positive integer or null")),
        }
    }

    fn fraction(&self, key: &str, default: f64) -> Result<f64> {
        let v = match self.map.get(key) {
            None => return Ok(default),
            Some(HyperValue::Float(v)) => *v,
            Some(HyperValue::Int(v)) => *v as f64,
            Some(_) => return Err(self.bad(key, "a number in (0, 1]")),
        };
        if v > 0.0 && v <= 1.0 { Ok(v) } else { Err(self.bad(key, "a number in (0, 1]")) }
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v = match self.map.get(key) {
            None => return Ok(default),
            Some(HyperValue::Float(v)) => *v,
            Some(HyperValue::Int(v)) => *v as f64,
            Some(_) => return Err(self.bad(key, "a positive number")),
        };
        if v > 0.0 && v.is_finite() { Ok(v) } else { Err(self.bad(key, "a positive number")) }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(HyperValue::Bool(b)) => Ok(*b),
            Some(_) => Err(self.bad(key, "true or false")),
        }
    }

    fn choice(&self, key: &str, default: &'static str, options: &[&'static str]) -> Result<&'static str> {
        match self.map.get(key) {
            None => Ok(default),
            Some(HyperValue::Str(s)) => options.iter().copied().find(|o| o == s).ok_or_else(|| self.bad(key, &format!("one of {options:?}"))),
            Some(_) => Err(self.bad(key, &format!("one of {options:?}"))),
        }
    }

    fn max_features(&self, key: &str, default: MaxFeatures) -> Result<MaxFeatures> {
        let want = "\"sqrt\", \"log2\", \"all\", null, a positive integer or a fraction in (0, 1]";
        match self.map.get(key) {
            None => Ok(default),
            Some(HyperValue::Null) => Ok(MaxFeatures::All),
            Some(HyperValue::Str(s)) => match s.as_str() {
                "sqrt" => Ok(MaxFeatures::Sqrt),
                "log2" => Ok(MaxFeatures::Log2),
                "all" | "none" => Ok(MaxFeatures::All),
                _ => Err(self.bad(key, want)),
            },
            Some(HyperValue::Int(v)) if *v >= 1 => Ok(MaxFeatures::Count(*v as usize)),
            Some(HyperValue::Float(v)) if *v > 0.0 && *v <= 1.0 => Ok(MaxFeatures::Fraction(*v)),
            Some(_) => Err(self.bad(key, want)),
        }
    }

    fn tree(&self, max_features: MaxFeatures, splitter: Splitter, max_depth: Option<usize>) -> Result<TreeParams> {
        let criterion = match self.choice("criterion", "gini", &["gini", "entropy"])? {
            "entropy" => Criterion::Entropy,
            _ => Criterion::Gini,
        };
        Ok(TreeParams {
            criterion,
            max_depth: self.depth(max_depth)?,
            min_samples_split: self.count("min_samples_split", 2)?.max(2),
            min_samples_leaf: self.count("min_samples_leaf", 1)?,
            max_features: self.max_features("max_features", max_features)?,
            splitter,
        })
    }
}

impl Resolved {
    /// Ensemble size or boosting stage count.
    pub fn n_members(&self) -> Option<usize> {
        match self {
            Resolved::Ensemble(p) => Some(p.n_estimators),
            Resolved::Boost(p) => Some(p.n_estimators),
            _ => None,
        }
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let alg = spec.algorithm;
        if let Some(key) = spec.hyperparameters.keys().find(|k| !alg.allowed_keys().contains(&k.as_str())) {
            return Err(Error::InvalidParameter(format!(
                "{}: unknown hyperparameter `{key}` (accepted: {:?})",
                alg.name(),
                alg.allowed_keys()
            )));
        }
        if spec.hyperparameters.get("min_samples_split") == Some(&HyperValue::Int(1)) {
            return Err(Error::InvalidParameter(format!("{}: min_samples_split must be at least 2", alg.name())));
        }
        let r = Reader { alg, map: &spec.hyperparameters };
        Ok(match alg {
            Algorithm::Tree => Resolved::Tree(r.tree(MaxFeatures::All, Splitter::Best, None)?),
            Algorithm::Forest | Algorithm::ExtraTrees => {
                let (splitter, bootstrap) =
                    if alg == Algorithm::Forest { (Splitter::Best, true) } else { (Splitter::Random, false) };
                Resolved::Ensemble(EnsembleParams {
                    n_estimators: r.count("n_estimators", 100)?,
                    rows: r.flag("bootstrap", bootstrap)?.then_some(RowDraw { fraction: 1.0, replace: true }),
                    member_features: None,
                    tree: r.tree(MaxFeatures::Sqrt, splitter, None)?,
                })
            }
            Algorithm::Bagging => {
                let mut tree = r.tree(MaxFeatures::Sqrt, Splitter::Random, None)?;
                tree.max_features = r.max_features("base_max_features", MaxFeatures::Sqrt)?;
                Resolved::Ensemble(EnsembleParams {
                    n_estimators: r.count("n_estimators", 10)?,
                    rows: Some(RowDraw { fraction: r.fraction("max_samples", 0.8)?, replace: r.flag("bootstrap", true)? }),
                    member_features: Some(r.max_features("max_features", MaxFeatures::Fraction(0.8))?),
                    tree,
                })
            }
            Algorithm::GBoost => Resolved::Boost(BoostParams {
                n_estimators: r.count("n_estimators", 100)?,
                learning_rate: r.positive("learning_rate", 0.1)?,
                subsample: r.fraction("subsample", 1.0)?,
                tree: r.tree(MaxFeatures::All, Splitter::Best, Some(3))?,
            }),
            Algorithm::Knn => {
                let p = r.positive("minkowski_p", 2.0)?;
                if p < 1.0 {
                    return Err(r.bad("minkowski_p", "at least 1"));
                }
                Resolved::Knn(KnnParams {
                    n_neighbors: r.count("n_neighbors", 5)?,
                    weights: if r.choice("weights", "uniform", &["uniform", "distance"])? == "distance" {
                        Weights::Distance
                    } else {
                        Weights::Uniform
                    },
                    minkowski_p: p,
                })
            }
        })
    }
}

/// Per-feature affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Population standard deviation, `1` for constant columns.
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &[f64], d: usize) -> Self {
        let n = (x.len() / d).max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let scale = var.into_iter().map(|v| (v / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Scaler { mean, scale }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        x.chunks_exact(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.scale[j]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Fitted {
    /// Averaged leaf distributions (one member for a single tree).
    Trees { trees: Vec<Tree> },
    /// Staged log-odds: `init_score + learning_rate * sum(stage outputs)`.
    Boosted { init_score: f64, learning_rate: f64, stages: Vec<Tree> },
    Neighbors { n_neighbors: usize, weights: Weights, minkowski_p: f64, x: Vec<f64>, y: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub scaler: Option<Scaler>,
    pub n_train: usize,
    pub fitted: Fitted,
}

/// Random stream for ensemble member or boosting stage `stream`.
pub fn member_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sigmoid(f: f64) -> f64 {
    1.0 / (1.0 + (-f).exp())
}

pub fn fit(spec: &ModelSpec, train: &Dataset) -> Result<TrainedModel> {
    let resolved = spec.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set has no records".into()));
    }
    let d = train.n_features();
    let (n0, n1) = train.class_counts();
    let scaler = (spec.scaling == Scaling::Standardize).then(|| Scaler::fit(&train.features, d));
    let x = match &scaler {
        Some(s) => s.transform(&train.features),
        None => train.features.clone(),
    };
    let y = train.targets();
    let n = y.len();
    let fitted = match resolved {
        Resolved::Tree(p) => {
            let cols = Columns::from_rows(&x, d);
            Fitted::Trees { trees: vec![tree::fit_classifier(&cols, &y, &p, &mut member_rng(spec.seed, 0))] }
        }
        Resolved::Ensemble(p) => {
            let cols = Columns::from_rows(&x, d);
            let trees = (0..p.n_estimators)
                .into_par_iter()
                .map(|t| fit_member(&cols, &y, &p, spec.seed, t as u64))
                .collect();
            Fitted::Trees { trees }
        }
        Resolved::Boost(p) => {
            if n0 == 0 || n1 == 0 {
                return Err(Error::InvalidParameter(
                    "gboost: training set holds a single class; the prior log-odds are undefined".into(),
                ));
            }
            fit_boost(&x, d, &y, &p, spec.seed)
        }
        Resolved::Knn(p) => {
            if n < p.n_neighbors {
                return Err(Error::InvalidParameter(format!(
                    "knn: {} training records but n_neighbors = {}",
                    n, p.n_neighbors
                )));
            }
            Fitted::Neighbors { n_neighbors: p.n_neighbors, weights: p.weights, minkowski_p: p.minkowski_p, x, y }
        }
    };
    Ok(TrainedModel { spec: spec.clone(), feature_names: train.feature_names.clone(), scaler, n_train: n, fitted })
}

fn fit_member(cols: &Columns, y: &[u8], p: &EnsembleParams, seed: u64, t: u64) -> Tree {
    let mut rng = member_rng(seed, t);
    let n = cols.n_rows;
    let rows: Vec<usize> = match p.rows {
        None => (0..n).collect(),
        Some(draw) => {
            let m = ((draw.fraction * n as f64) as usize).max(1);
            if draw.replace {
                (0..m).map(|_| rng.random_range(0..n)).collect()
            } else {
                index::sample(&mut rng, n, m.min(n)).into_vec()
            }
        }
    };
    let d = cols.n_features();
    let features: Vec<usize> = match p.member_features {
        None => (0..d).collect(),
        Some(mf) => {
            let mut f = index::sample(&mut rng, d, mf.resolve(d)).into_vec();
            f.sort_unstable();
            f
        }
    };
    let target = tree::ClassTarget { y, criterion: p.tree.criterion };
    tree::grow(cols, &target, rows, &features, &p.tree, &mut rng)
}

fn fit_boost(x: &[f64], d: usize, y: &[u8], p: &BoostParams, seed: u64) -> Fitted {
    let cols = Columns::from_rows(x, d);
    let n = y.len();
    let prior = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let init_score = (prior / (1.0 - prior)).ln();
    let mut score = vec![init_score; n];
    let features: Vec<usize> = (0..d).collect();
    let mut stages = Vec::with_capacity(p.n_estimators);
    for stage in 0..p.n_estimators {
        let mut rng = member_rng(seed, stage as u64);
        let prob: Vec<f64> = score.iter().map(|&f| sigmoid(f)).collect();
        let resid: Vec<f64> = y.iter().zip(&prob).map(|(&v, &q)| v as f64 - q).collect();
        let hess: Vec<f64> = prob.iter().map(|&q| q * (1.0 - q)).collect();
        let rows: Vec<usize> = if p.subsample < 1.0 {
            let m = ((p.subsample * n as f64) as usize).max(1);
            let mut r = index::sample(&mut rng, n, m).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        // one Newton step on the logistic loss per leaf
        let leaf = |leaf_rows: &[usize]| {
            let num: f64 = leaf_rows.iter().map(|&i| resid[i]).sum();
            let den: f64 = leaf_rows.iter().map(|&i| hess[i]).sum();
            if den.abs() < 1e-150 { 0.0 } else { num / den }
        };
        let target = tree::RegTarget { r: &resid, leaf };
        let t = tree::grow(&cols, &target, rows, &features, &p.tree, &mut rng);
        for (i, s) in score.iter_mut().enumerate() {
            *s += p.learning_rate * t.predict(&x[i * d..(i + 1) * d]);
        }
        stages.push(t);
    }
    Fitted::Boosted { init_score, learning_rate: p.learning_rate, stages }
}

fn minkowski(a: &[f64], b: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum()
    } else if p == 2.0 {
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
    } else {
        a.iter().zip(b).map(|(u, v)| (u - v).abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

fn knn_proba(query: &[f64], x: &[f64], y: &[u8], k: usize, weights: Weights, p: f64) -> f64 {
    let d = query.len();
    let mut dist: Vec<(f64, usize)> = x.chunks_exact(d).enumerate().map(|(i, r)| (minkowski(query, r, p), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.sort_unstable_by(cmp);
    match weights {
        Weights::Uniform => dist.iter().map(|&(_, i)| y[i] as f64).sum::<f64>() / dist.len() as f64,
        Weights::Distance => {
            let exact: Vec<usize> = dist.iter().filter(|e| e.0 == 0.0).map(|e| e.1).collect();
            if !exact.is_empty() {
                return exact.iter().map(|&i| y[i] as f64).sum::<f64>() / exact.len() as f64;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for &(dd, i) in &dist {
                num += y[i] as f64 / dd;
                den += 1.0 / dd;
            }
            num / den
        }
    }
}

impl TrainedModel {
    pub fn algorithm(&self) -> Algorithm {
        self.spec.algorithm
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn check_features(&self, names: &[String]) -> Result<()> {
        if names != self.feature_names.as_slice() {
            return Err(Error::FeatureMismatch { expected: self.feature_names.clone(), found: names.to_vec() });
        }
        Ok(())
    }

    /// Spatter probability of one row given in model feature order.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let scaled;
        let row = match &self.scaler {
            Some(s) => {
                scaled = s.transform(row);
                &scaled[..]
            }
            None => row,
        };
        self.predict_scaled(row)
    }

    /// Like [`predict_row`](Self::predict_row) for a row already passed
    /// through the model scaler.
    pub fn predict_scaled(&self, row: &[f64]) -> f64 {
        match &self.fitted {
            Fitted::Trees { trees } => trees.iter().map(|t| t.predict(row)).sum::<f64>() / trees.len() as f64,
            Fitted::Boosted { init_score, learning_rate, stages } => {
                sigmoid(stages.iter().fold(*init_score, |f, t| f + learning_rate * t.predict(row)))
            }
            Fitted::Neighbors { n_neighbors, weights, minkowski_p, x, y } => {
                knn_proba(row, x, y, *n_neighbors, *weights, *minkowski_p)
            }
        }
    }

    /// Spatter probabilities for a row-major table in model feature order.
    pub fn predict_rows(&self, x: &[f64]) -> Vec<f64> {
        let d = self.n_features();
        x.par_chunks(d).map(|row| self.predict_row(row)).collect()
    }

    /// `[meltpool, spatter]` probability pairs.
    pub fn predict_proba(&self, ds: &Dataset) -> Result<Vec<[f64; 2]>> {
        self.check_features(&ds.feature_names)?;
        Ok(self.predict_rows(&ds.features).into_iter().map(|p| [1.0 - p, p]).collect())
    }

    pub fn predict_spatter(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.check_features(&ds.feature_names)?;
        Ok(self.predict_rows(&ds.features))
    }

    /// Spatter probabilities of the first `counts[c]` members or stages, for
    /// every `c`; member `k` never depends on the ensemble size, so each
    /// prefix equals a model trained with that many members.
    pub fn predict_prefixes(&self, x: &[f64], counts: &[usize]) -> Vec<Vec<f64>> {
        let d = self.n_features();
        let scaled;
        let x = match &self.scaler {
            Some(s) => {
                scaled = s.transform(x);
                &scaled[..]
            }
            None => x,
        };
        let per_row: Vec<Vec<f64>> = x
            .par_chunks(d)
            .map(|row| match &self.fitted {
                Fitted::Trees { trees } => {
                    let mut out = Vec::with_capacity(counts.len());
                    let mut acc = 0.0;
                    let mut done = 0;
                    for &c in counts {
                        assert!(c >= 1 && c <= trees.len(), "prefix {c} outside 1..={}", trees.len());
                        // counts may be unsorted; restart when going backwards
                        if c < done {
                            acc = 0.0;
                            done = 0;
                        }
                        for t in &trees[done..c] {
                            acc += t.predict(row);
                        }
                        done = c;
                        out.push(acc / c as f64);
                    }
                    out
                }
                Fitted::Boosted { init_score, learning_rate, stages } => {
                    let mut out = Vec::with_capacity(counts.len());
                    let mut f = *init_score;
                    let mut done = 0;
                    for &c in counts {
                        assert!(c <= stages.len(), "prefix {c} outside 0..={}", stages.len());
                        if c < done {
                            f = *init_score;
                            done = 0;
                        }
                        for t in &stages[done..c] {
                            f += learning_rate * t.predict(row);
                        }
                        done = c;
                        out.push(sigmoid(f));
                    }
                    out
                }
                Fitted::Neighbors { .. } => vec![self.predict_row(row); counts.len()],
            })
            .collect();
        (0..counts.len()).map(|c| per_row.iter().map(|r| r[c]).collect()).collect()
    }
}

pub fn evaluate(model: &TrainedModel, ds: &Dataset, threshold: f64) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set has no records".into()));
    }
    let proba = model.predict_spatter(ds)?;
    Ok(metrics::report(&ds.targets(), &proba, threshold))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::Label;

    pub(crate) fn table(x: &[f64], d: usize, y: &[u8], names: &[&str]) -> Dataset {
        assert_eq!(x.len(), d * y.len());
        Dataset {
            feature_names: names.iter().map(|s| s.to_string()).collect(),
            features: x.to_vec(),
            labels: y.iter().map(|&c| Label::from_code(c).unwrap()).collect(),
            provenance: Vec::new(),
        }
    }

    fn xor() -> Dataset {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (cx, cy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            for _ in 0..10 {
                x.extend_from_slice(&[cx, cy]);
                y.push(u8::from((cx > 0.0) != (cy > 0.0)));
            }
        }
        table(&x, 2, &y, &["a", "b"])
    }

    fn accuracy(m: &TrainedModel, ds: &Dataset) -> f64 {
        evaluate(m, ds, 0.5).unwrap().accuracy
    }

    #[test]
    fn rejects_unknown_and_invalid_hyperparameters() {
        assert!(ModelSpec::new(Algorithm::Forest).with("n_neighbors", 3i64).validate().is_err());
        assert!(ModelSpec::new(Algorithm::Forest).with("n_estimators", 0i64).validate().is_err());
        assert!(ModelSpec::new(Algorithm::GBoost).with("learning_rate", 0.0).validate().is_err());
        assert!(ModelSpec::new(Algorithm::Tree).with("criterion", "mse").validate().is_err());
        assert!(ModelSpec::new(Algorithm::Knn).with("weights", "distance").with("minkowski_p", 1i64).validate().is_ok());
    }

    #[test]
    fn spec_json_rejects_unknown_fields() {
        let ok: ModelSpec = serde_json::from_str(r#"{"algorithm":"forest","hyperparameters":{"max_depth":null}}"#).unwrap();
        assert_eq!(ok.hyperparameters["max_depth"], HyperValue::Null);
        assert!(serde_json::from_str::<ModelSpec>(r#"{"algorithm":"forest","depth":3}"#).is_err());
    }

    #[test]
    fn single_label_tree_is_constant() {
        let ds = table(&[0.0, 1.0, 2.0], 1, &[0, 0, 0], &["a"]);
        let m = fit(&ModelSpec::new(Algorithm::Tree), &ds).unwrap();
        assert_eq!(m.fitted, Fitted::Trees { trees: vec![Tree { root: Node::Leaf { value: 0.0, n_samples: 3 }, importances: vec![0.0] }] });
        assert_eq!(m.predict_proba(&ds).unwrap(), vec![[1.0, 0.0]; 3]);
        assert!(fit(&ModelSpec::new(Algorithm::GBoost), &ds).is_err());
    }

    #[test]
    fn forest_of_depth_two_trees_solves_xor() {
        let ds = xor();
        let spec = ModelSpec::new(Algorithm::Forest).with("max_depth", 2i64).with("n_estimators", 50i64).seed(3);
        assert_eq!(accuracy(&fit(&spec, &ds).unwrap(), &ds), 1.0);
    }

    #[test]
    fn knn_k1_memorizes_distinct_points() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 37) % 23) as f64 + 0.01 * i as f64).collect();
        let y: Vec<u8> = (0..20).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let ds = table(&x, 2, &y, &["a", "b"]);
        for p in [1i64, 2] {
            let spec = ModelSpec::new(Algorithm::Knn).with("n_neighbors", 1i64).with("minkowski_p", p);
            assert_eq!(accuracy(&fit(&spec, &ds).unwrap(), &ds), 1.0);
        }
        let spec = ModelSpec::new(Algorithm::Knn).with("n_neighbors", 21i64);
        assert!(fit(&spec, &ds).is_err());
    }

    #[test]
    fn knn_distance_weights() {
        let ds = table(&[0.0, 1.0, 3.0], 1, &[1, 0, 0], &["a"]);
        let spec = ModelSpec::new(Algorithm::Knn).with("n_neighbors", 2i64).with("weights", "distance");
        let m = fit(&spec, &ds).unwrap();
        // neighbors of 0.5: distances 0.5 and 0.5
        assert_eq!(m.predict_row(&[0.5]), 0.5);
        // neighbors of 0.25: spatter at 0.25, melt pool at 0.75 -> weights 4 and 4/3
        assert!((m.predict_row(&[0.25]) - 0.75).abs() < 1e-15);
        assert_eq!(m.predict_row(&[1.0]), 0.0);
    }

    #[test]
    fn two_tree_vote_averages() {
        let leaf = |v| Tree { root: Node::Leaf { value: v, n_samples: 1 }, importances: vec![0.0] };
        let m = TrainedModel {
            spec: ModelSpec::new(Algorithm::Forest),
            feature_names: vec!["a".into()],
            scaler: None,
            n_train: 2,
            fitted: Fitted::Trees { trees: vec![leaf(1.0), leaf(0.0)] },
        };
        assert_eq!(m.predict_row(&[0.0]), 0.5);
    }

    #[test]
    fn zero_stage_boost_returns_prior() {
        let m = TrainedModel {
            spec: ModelSpec::new(Algorithm::GBoost),
            feature_names: vec!["a".into()],
            scaler: None,
            n_train: 4,
            fitted: Fitted::Boosted { init_score: (0.25f64 / 0.75).ln(), learning_rate: 0.1, stages: vec![] },
        };
        assert!((m.predict_row(&[3.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gboost_fits_separable_data() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<u8> = (0..40).map(|i| u8::from(i >= 25)).collect();
        let ds = table(&x, 1, &y, &["a"]);
        let spec = ModelSpec::new(Algorithm::GBoost).with("n_estimators", 30i64).with("subsample", 0.8).seed(1);
        let m = fit(&spec, &ds).unwrap();
        assert_eq!(accuracy(&m, &ds), 1.0);
        let p = m.predict_spatter(&ds).unwrap();
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ensembles_are_deterministic_and_serializable() {
        let ds = xor();
        for alg in [Algorithm::Forest, Algorithm::ExtraTrees, Algorithm::Bagging, Algorithm::GBoost] {
            let spec = ModelSpec::new(alg).with("n_estimators", 7i64).seed(11);
            let a = fit(&spec, &ds).unwrap();
            let b = fit(&spec, &ds).unwrap();
            assert_eq!(a, b);
            let json = serde_json::to_string(&a).unwrap();
            let back: TrainedModel = serde_json::from_str(&json).unwrap();
            assert_eq!(back.predict_spatter(&ds).unwrap(), a.predict_spatter(&ds).unwrap());
        }
    }

    #[test]
    fn thread_count_does_not_change_forest() {
        let ds = xor();
        let spec = ModelSpec::new(Algorithm::Forest).with("n_estimators", 9i64).seed(2);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| fit(&spec, &ds).unwrap());
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| fit(&spec, &ds).unwrap());
        assert_eq!(one, four);
    }

    #[test]
    fn prefixes_match_smaller_ensembles() {
        let ds = xor();
        for alg in [Algorithm::Forest, Algorithm::GBoost] {
            let big = fit(&ModelSpec::new(alg).with("n_estimators", 6i64).with("max_depth", 1i64).seed(5), &ds).unwrap();
            let pre = big.predict_prefixes(&ds.features, &[2, 6, 3]);
            for (c, col) in [2i64, 6, 3].into_iter().zip(&pre) {
                let small = fit(&ModelSpec::new(alg).with("n_estimators", c).with("max_depth", 1i64).seed(5), &ds).unwrap();
                assert_eq!(&small.predict_spatter(&ds).unwrap(), col);
            }
        }
    }

    #[test]
    fn feature_mismatch_is_reported() {
        let ds = xor();
        let m = fit(&ModelSpec::new(Algorithm::Tree), &ds).unwrap();
        let other = table(&[0.0, 0.0], 2, &[1], &["b", "a"]);
        assert!(matches!(m.predict_proba(&other), Err(Error::FeatureMismatch { .. })));
    }

    #[test]
    fn standardized_knn_ignores_units() {
        let x = [0.0, 1000.0, 1.0, 0.0, 0.0, 3000.0, 1.0, 2000.0];
        let ds = table(&x, 2, &[0, 1, 0, 1], &["a", "b"]);
        let spec = ModelSpec { scaling: Scaling::Standardize, ..ModelSpec::new(Algorithm::Knn).with("n_neighbors", 1i64) };
        let m = fit(&spec, &ds).unwrap();
        assert!(m.scaler.is_some());
        assert_eq!(accuracy(&m, &ds), 1.0);
    }
}
