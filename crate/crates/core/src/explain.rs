//! Exact Shapley attributions by coalition enumeration against a background
//! set, SHAP-style summaries, and one-feature partial dependence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantile_sorted, Dataset};
use crate::error::{Error, Result};
use crate::io_util::{csv_text, fmt_f64};
use crate::learners::{Fitted, Node, TrainedModel};
use crate::num::Scalar;

pub const DEFAULT_MAX_FEATURES: usize = 16;
pub const DEFAULT_BACKGROUND: usize = 200;
pub const DEFAULT_PDP_POINTS: usize = 50;

/// A model as seen by the explainers: spatter probability of one row.
pub trait Predictor<S: Scalar>: Sync {
    fn n_features(&self) -> usize;

    fn predict(&self, row: &[S]) -> S;

    fn predict_batch(&self, rows: &[S]) -> Vec<S> {
        rows.chunks_exact(self.n_features()).map(|r| self.predict(r)).collect()
    }

    /// `f(S)` for every coalition mask, bit `j` set meaning feature `j` is
    /// taken from `x` and the rest from each background row, averaged over
    /// the background.
    fn coalition_values(&self, x: &[S], background: &[S]) -> Vec<S> {
        let d = self.n_features();
        let n_bg = background.len() / d;
        let mut hybrid = vec![S::zero(); d];
        (0..1usize << d)
            .map(|mask| {
                let mut acc = S::zero();
                for b in background.chunks_exact(d) {
                    for j in 0..d {
                        hybrid[j] = if mask >> j & 1 == 1 { x[j].clone() } else { b[j].clone() };
                    }
                    acc = acc + self.predict(&hybrid);
                }
                acc / S::from_usize(n_bg).unwrap()
            })
            .collect()
    }
}

/// Wraps a closure as a [`Predictor`].
pub struct FnModel<F> {
    pub n_features: usize,
    pub f: F,
}

impl<S: Scalar, F: Fn(&[S]) -> S + Sync> Predictor<S> for FnModel<F> {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, row: &[S]) -> S {
        (self.f)(row)
    }
}

/// Adds `value` to every coalition reaching `node`'s leaves. `inc` and
/// `exc` are the features forced into and out of the coalition on the
/// path so far.
fn tree_coalitions(node: &Node, x: &[f64], b: &[f64], inc: u32, exc: u32, full: u32, acc: &mut [f64], weight: f64) {
    match node {
        Node::Leaf { value, .. } => {
            let free = full & !(inc | exc);
            let v = weight * value;
            let mut sub = free;
            loop {
                acc[(inc | sub) as usize] += v;
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & free;
            }
        }
        Node::Split { feature, threshold, left, right, .. } => {
            let bit = 1u32 << feature;
            let child = |go_left: bool| if go_left { &**left } else { &**right };
            let gx = x[*feature] <= *threshold;
            let gb = b[*feature] <= *threshold;
            if gx == gb {
                tree_coalitions(child(gx), x, b, inc, exc, full, acc, weight);
            } else {
                if exc & bit == 0 {
                    tree_coalitions(child(gx), x, b, inc | bit, exc, full, acc, weight);
                }
                if inc & bit == 0 {
                    tree_coalitions(child(gb), x, b, inc, exc | bit, full, acc, weight);
                }
            }
        }
    }
}

impl Predictor<f64> for TrainedModel {
    fn n_features(&self) -> usize {
        TrainedModel::n_features(self)
    }

    fn predict(&self, row: &[f64]) -> f64 {
        self.predict_row(row)
    }

    fn predict_batch(&self, rows: &[f64]) -> Vec<f64> {
        self.predict_rows(rows)
    }

    /// Tree models route each background row once per tree, splitting the
    /// coalition set only where `x` and the background row disagree.
    fn coalition_values(&self, x: &[f64], background: &[f64]) -> Vec<f64> {
        let d = TrainedModel::n_features(self);
        let (x, background) = match &self.scaler {
            Some(s) => (s.transform(x), s.transform(background)),
            None => (x.to_vec(), background.to_vec()),
        };
        let n_masks = 1usize << d;
        let full = (n_masks - 1) as u32;
        let n_bg = background.len() / d;
        let mut f = vec![0.0; n_masks];
        let mut acc = vec![0.0; n_masks];
        match &self.fitted {
            Fitted::Trees { trees } => {
                for b in background.chunks_exact(d) {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for t in trees {
                        tree_coalitions(&t.root, &x, b, 0, 0, full, &mut acc, 1.0);
                    }
                    for (fs, a) in f.iter_mut().zip(&acc) {
                        *fs += a / trees.len() as f64;
                    }
                }
            }
            Fitted::Boosted { init_score, learning_rate, stages } => {
                for b in background.chunks_exact(d) {
                    acc.iter_mut().for_each(|a| *a = *init_score);
                    for t in stages {
                        tree_coalitions(&t.root, &x, b, 0, 0, full, &mut acc, *learning_rate);
                    }
                    for (fs, a) in f.iter_mut().zip(&acc) {
                        *fs += 1.0 / (1.0 + (-a).exp());
                    }
                }
            }
            Fitted::Neighbors { .. } => {
                let mut hybrid = vec![0.0; d];
                for (mask, fs) in f.iter_mut().enumerate() {
                    for b in background.chunks_exact(d) {
                        for j in 0..d {
                            hybrid[j] = if mask >> j & 1 == 1 { x[j] } else { b[j] };
                        }
                        // already scaled, so bypass the model scaler
                        *fs += self.predict_scaled(&hybrid);
                    }
                }
            }
        }
        f.iter_mut().for_each(|v| *v /= n_bg as f64);
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution<S> {
    pub phi: Vec<S>,
    /// Mean background prediction.
    pub base_value: S,
    pub prediction: S,
}

/// Shapley weights `|S|! (d-|S|-1)! / d!` indexed by `|S|`.
fn shapley_weights<S: Scalar>(d: usize) -> Vec<S> {
    let fact = |n: usize| (1..=n).fold(S::one(), |a, k| a * S::from_usize(k).unwrap());
    (0..d).map(|s| fact(s) * fact(d - s - 1) / fact(d)).collect()
}

/// Exact Shapley values of `x` under interventional background replacement.
pub fn shapley_values<S: Scalar, P: Predictor<S> + ?Sized>(
    model: &P,
    x: &[S],
    background: &[S],
    max_features: usize,
) -> Result<Attribution<S>> {
    let d = model.n_features();
    if d > max_features || d > 30 {
        return Err(Error::InvalidParameter(format!(
            "{d} features needs 2^{d} coalitions; the limit is {max_features}. Drop features or raise the limit"
        )));
    }
    if x.len() != d {
        return Err(Error::InvalidParameter(format!("record has {} values, model expects {d}", x.len())));
    }
    if background.is_empty() || background.len() % d != 0 {
        return Err(Error::Empty("background set has no complete rows".into()));
    }
    let f = model.coalition_values(x, background);
    let w = shapley_weights::<S>(d);
    let phi = (0..d)
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = S::zero();
            for mask in 0..f.len() {
                if mask & bit == 0 {
                    let size = mask.count_ones() as usize;
                    acc = acc + w[size].clone() * (f[mask | bit].clone() - f[mask].clone());
                }
            }
            acc
        })
        .collect();
    Ok(Attribution { phi, base_value: f[0].clone(), prediction: model.predict(x) })
}

/// Seeded background subsample of at most `max_rows` rows.
pub fn background_rows(ds: &Dataset, max_rows: usize, seed: u64) -> Dataset {
    if ds.n_rows() <= max_rows {
        return ds.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, ds.n_rows(), max_rows).into_vec();
    idx.sort_unstable();
    ds.subset(&idx)
}

/// Attributions for every record of `ds`, in parallel.
pub fn explain_dataset(model: &TrainedModel, ds: &Dataset, background: &Dataset, max_features: usize) -> Result<Vec<Attribution<f64>>> {
    model.check_features(&ds.feature_names)?;
    model.check_features(&background.feature_names)?;
    ds.rows().collect::<Vec<_>>().par_iter().map(|row| shapley_values(model, row, &background.features, max_features)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub mean_abs_phi: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub feature_names: Vec<String>,
    /// Descending mean |φ|; ties keep feature order.
    pub ranking: Vec<RankedFeature>,
    pub attributions: Vec<Attribution<f64>>,
    /// Explained records, row-major, for beeswarm-style plots.
    pub values: Vec<f64>,
}

pub fn shap_summary(model: &TrainedModel, ds: &Dataset, background: &Dataset, max_features: usize) -> Result<ShapSummary> {
    let attributions = explain_dataset(model, ds, background, max_features)?;
    let d = ds.n_features();
    let n = attributions.len().max(1) as f64;
    let mut mean_abs: Vec<(usize, f64)> =
        (0..d).map(|j| (j, attributions.iter().map(|a| a.phi[j].abs()).sum::<f64>() / n)).collect();
    mean_abs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ranking = mean_abs
        .into_iter()
        .enumerate()
        .map(|(r, (j, m))| RankedFeature { feature: ds.feature_names[j].clone(), mean_abs_phi: m, rank: r + 1 })
        .collect();
    Ok(ShapSummary { feature_names: ds.feature_names.clone(), ranking, attributions, values: ds.features.clone() })
}

pub fn shap_csv(summary: &ShapSummary) -> String {
    let d = summary.feature_names.len();
    csv_text(
        &["record", "feature", "value", "phi"],
        summary.attributions.iter().enumerate().flat_map(|(i, a)| {
            (0..d).map(move |j| {
                vec![i.to_string(), summary.feature_names[j].clone(), fmt_f64(summary.values[i * d + j]), fmt_f64(a.phi[j])]
            })
        }),
    )
}

pub fn shap_summary_csv(summary: &ShapSummary) -> String {
    csv_text(
        &["feature", "mean_abs_phi", "rank"],
        summary.ranking.iter().map(|r| vec![r.feature.clone(), fmt_f64(r.mean_abs_phi), r.rank.to_string()]),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdpGrid {
    Explicit(Vec<f64>),
    Quantiles(usize),
}

impl Default for PdpGrid {
    fn default() -> Self {
        PdpGrid::Quantiles(DEFAULT_PDP_POINTS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdpCurve {
    pub feature: String,
    pub grid: Vec<f64>,
    pub mean_probability: Vec<f64>,
}

/// Mean prediction with `feature` overwritten by each grid value.
pub fn pdp<P: Predictor<f64> + ?Sized>(model: &P, ds: &Dataset, feature: &str, grid: &PdpGrid) -> Result<PdpCurve> {
    let j = ds.feature_index(feature).ok_or_else(|| Error::InvalidParameter(format!("feature `{feature}` not in dataset")))?;
    if ds.is_empty() {
        return Err(Error::Empty("dataset has no records".into()));
    }
    let mut values = match grid {
        PdpGrid::Explicit(v) => v.clone(),
        PdpGrid::Quantiles(m) => {
            let mut col = ds.column(j);
            col.sort_by(f64::total_cmp);
            match *m {
                0 => Vec::new(),
                1 => vec![quantile_sorted(&col, 0.5)],
                m => (0..m).map(|k| quantile_sorted(&col, k as f64 / (m - 1) as f64)).collect(),
            }
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("PDP grid contains non-finite values".into()));
    }
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.is_empty() {
        return Err(Error::InvalidParameter("PDP grid is empty".into()));
    }
    let d = ds.n_features();
    let mut x = ds.features.clone();
    let mean_probability = values
        .iter()
        .map(|&v| {
            for i in 0..ds.n_rows() {
                x[i * d + j] = v;
            }
            let p = model.predict_batch(&x);
            p.iter().sum::<f64>() / p.len() as f64
        })
        .collect();
    Ok(PdpCurve { feature: feature.to_string(), grid: values, mean_probability })
}

pub fn pdp_csv(curve: &PdpCurve) -> String {
    csv_text(
        &["value", "mean_probability"],
        curve.grid.iter().zip(&curve.mean_probability).map(|(v, p)| vec![fmt_f64(*v), fmt_f64(*p)]),
    )
}
