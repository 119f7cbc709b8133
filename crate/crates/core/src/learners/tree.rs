//! CART growth shared by every tree-based learner.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gini,
    Entropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaxFeatures {
    Sqrt,
    Log2,
    All,
    Count(usize),
    Fraction(f64),
}

impl MaxFeatures {
    /// Number of candidate features out of `d`, at least one.
    pub fn resolve(self, d: usize) -> usize {
        let k = match self {
            MaxFeatures::Sqrt => (d as f64).sqrt() as usize,
            MaxFeatures::Log2 => (d as f64).log2() as usize,
            MaxFeatures::All => d,
            MaxFeatures::Count(n) => n,
            MaxFeatures::Fraction(f) => (f * d as f64) as usize,
        };
        k.clamp(1, d.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Splitter {
    /// Exhaustive search over midpoints of sorted distinct values.
    Best,
    /// One uniform threshold per candidate feature.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeParams {
    pub criterion: Criterion,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub splitter: Splitter,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            criterion: Criterion::Gini,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            splitter: Splitter::Best,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
        n_samples: usize,
    },
    Split {
        feature: usize,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        n_samples: usize,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, threshold, left, right, .. } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub root: Node,
    /// Weighted impurity decrease per feature, as a fraction of the root
    /// sample count.
    pub importances: Vec<f64>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.root.predict(row)
    }
}

/// Column-major copy of a row-major feature table.
pub struct Columns {
    pub n_rows: usize,
    pub cols: Vec<Vec<f64>>,
}

impl Columns {
    pub fn from_rows(x: &[f64], d: usize) -> Self {
        let n_rows = if d == 0 { 0 } else { x.len() / d };
        let cols = (0..d).map(|j| (0..n_rows).map(|i| x[i * d + j]).collect()).collect();
        Columns { n_rows, cols }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }
}

/// Per-node sufficient statistics for a split criterion.
pub(crate) trait Target {
    type Stats: Copy + Default;
    fn add(&self, s: &mut Self::Stats, i: usize);
    fn diff(a: &Self::Stats, b: &Self::Stats) -> Self::Stats;
    fn impurity(&self, s: &Self::Stats) -> f64;
    fn leaf_value(&self, s: &Self::Stats, rows: &[usize]) -> f64;
}

/// Binary labels; leaves hold the spatter fraction.
pub(crate) struct ClassTarget<'a> {
    pub y: &'a [u8],
    pub criterion: Criterion,
}

impl Target for ClassTarget<'_> {
    type Stats = [f64; 2];

    #[inline]
    fn add(&self, s: &mut [f64; 2], i: usize) {
        s[self.y[i] as usize] += 1.0;
    }

    #[inline]
    fn diff(a: &[f64; 2], b: &[f64; 2]) -> [f64; 2] {
        [a[0] - b[0], a[1] - b[1]]
    }

    #[inline]
    fn impurity(&self, s: &[f64; 2]) -> f64 {
        let n = s[0] + s[1];
        if n <= 0.0 {
            return 0.0;
        }
        let (p0, p1) = (s[0] / n, s[1] / n);
        match self.criterion {
            Criterion::Gini => 1.0 - p0 * p0 - p1 * p1,
            Criterion::Entropy => {
                let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
                h(p0) + h(p1)
            }
        }
    }

    fn leaf_value(&self, s: &[f64; 2], _rows: &[usize]) -> f64 {
        s[1] / (s[0] + s[1])
    }
}

/// Real-valued targets under squared error; leaf values come from a
/// caller-supplied rule.
pub(crate) struct RegTarget<'a, F: Fn(&[usize]) -> f64> {
    pub r: &'a [f64],
    pub leaf: F,
}

impl<F: Fn(&[usize]) -> f64> Target for RegTarget<'_, F> {
    type Stats = [f64; 3];

    #[inline]
    fn add(&self, s: &mut [f64; 3], i: usize) {
        let v = self.r[i];
        s[0] += 1.0;
        s[1] += v;
        s[2] += v * v;
    }

    #[inline]
    fn diff(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    #[inline]
    fn impurity(&self, s: &[f64; 3]) -> f64 {
        if s[0] <= 0.0 {
            return 0.0;
        }
        let mean = s[1] / s[0];
        (s[2] / s[0] - mean * mean).max(0.0)
    }

    fn leaf_value(&self, _s: &[f64; 3], rows: &[usize]) -> f64 {
        (self.leaf)(rows)
    }
}

struct Builder<'a, T: Target> {
    cols: &'a Columns,
    target: &'a T,
    params: &'a TreeParams,
    features: Vec<usize>,
    n_candidates: usize,
    rng: &'a mut ChaCha8Rng,
    importances: Vec<f64>,
    n_root: f64,
    buf: Vec<(f64, usize)>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    proxy: f64,
}

impl<T: Target> Builder<'_, T> {
    fn stats(&self, rows: &[usize]) -> T::Stats {
        let mut s = T::Stats::default();
        for &i in rows {
            self.target.add(&mut s, i);
        }
        s
    }

    fn node(&mut self, rows: &mut [usize], depth: usize) -> Node {
        let n = rows.len();
        let stats = self.stats(rows);
        let imp = self.target.impurity(&stats);
        let p = self.params;
        let stop = p.max_depth.is_some_and(|m| depth >= m)
            || n < p.min_samples_split
            || n < 2 * p.min_samples_leaf
            || imp <= 1e-15;
        let split = if stop { None } else { self.find_split(rows, &stats) };
        let Some(split) = split else {
            return Node::Leaf { value: self.target.leaf_value(&stats, rows), n_samples: n };
        };
        let col = &self.cols.cols[split.feature];
        let mut lo = 0;
        for k in 0..n {
            if col[rows[k]] <= split.threshold {
                rows.swap(lo, k);
                lo += 1;
            }
        }
        // impurity decrease: n*imp + proxy, with proxy = -(nL*impL + nR*impR)
        self.importances[split.feature] += (n as f64 * imp + split.proxy) / self.n_root;
        let (left_rows, right_rows) = rows.split_at_mut(lo);
        let left = self.node(left_rows, depth + 1);
        let right = self.node(right_rows, depth + 1);
        Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            n_samples: n,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Draws features lazily in random order until `n_candidates`
    /// non-constant ones have been evaluated.
    fn find_split(&mut self, rows: &[usize], total: &T::Stats) -> Option<SplitChoice> {
        let mut best: Option<SplitChoice> = None;
        let mut visited = 0;
        let m = self.features.len();
        for slot in 0..m {
            if visited >= self.n_candidates {
                break;
            }
            let pick = self.rng.random_range(slot..m);
            self.features.swap(slot, pick);
            let f = self.features[slot];
            let found = match self.params.splitter {
                Splitter::Best => self.best_on_feature(f, rows, total),
                Splitter::Random => self.random_on_feature(f, rows, total),
            };
            let Some(found) = found else { continue };
            visited += 1;
            if let Some(c) = found {
                if best.as_ref().is_none_or(|b| c.proxy > b.proxy) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn proxy(&self, left: &T::Stats, total: &T::Stats, n_left: usize, n_right: usize) -> f64 {
        let right = T::diff(total, left);
        -(n_left as f64 * self.target.impurity(left) + n_right as f64 * self.target.impurity(&right))
    }

    /// `None` when the feature is constant in the node; `Some(None)` when no
    /// position satisfies the leaf-size limit.
    fn best_on_feature(&mut self, f: usize, rows: &[usize], total: &T::Stats) -> Option<Option<SplitChoice>> {
        let col = &self.cols.cols[f];
        let mut buf = std::mem::take(&mut self.buf);
        buf.clear();
        buf.extend(rows.iter().map(|&i| (col[i], i)));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = buf.len();
        if buf[0].0 == buf[n - 1].0 {
            self.buf = buf;
            return None;
        }
        let min_leaf = self.params.min_samples_leaf;
        let mut left = T::Stats::default();
        let mut best: Option<SplitChoice> = None;
        for p in 0..n - 1 {
            self.target.add(&mut left, buf[p].1);
            let (v, next) = (buf[p].0, buf[p + 1].0);
            if v == next {
                continue;
            }
            let n_left = p + 1;
            if n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let proxy = self.proxy(&left, total, n_left, n - n_left);
            if best.as_ref().is_none_or(|b| proxy > b.proxy) {
                let mid = v + (next - v) / 2.0;
                let threshold = if mid < next { mid } else { v };
                best = Some(SplitChoice { feature: f, threshold, proxy });
            }
        }
        self.buf = buf;
        Some(best)
    }

    fn random_on_feature(&mut self, f: usize, rows: &[usize], total: &T::Stats) -> Option<Option<SplitChoice>> {
        let col = &self.cols.cols[f];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in rows {
            lo = lo.min(col[i]);
            hi = hi.max(col[i]);
        }
        if hi <= lo {
            return None;
        }
        let mut threshold = self.rng.random_range(lo..hi);
        if threshold >= hi {
            threshold = lo;
        }
        let mut left = T::Stats::default();
        let mut n_left = 0;
        for &i in rows {
            if col[i] <= threshold {
                self.target.add(&mut left, i);
                n_left += 1;
            }
        }
        let n_right = rows.len() - n_left;
        let min_leaf = self.params.min_samples_leaf;
        if n_left < min_leaf || n_right < min_leaf {
            return Some(None);
        }
        Some(Some(SplitChoice { feature: f, threshold, proxy: self.proxy(&left, total, n_left, n_right) }))
    }
}

/// Grows one tree over `rows` (duplicates allowed for bootstrap draws),
/// considering only the listed feature columns.
pub(crate) fn grow<T: Target>(
    cols: &Columns,
    target: &T,
    mut rows: Vec<usize>,
    features: &[usize],
    params: &TreeParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let n_candidates = params.max_features.resolve(features.len());
    let mut b = Builder {
        cols,
        target,
        params,
        features: features.to_vec(),
        n_candidates,
        rng,
        importances: vec![0.0; cols.n_features()],
        n_root: rows.len().max(1) as f64,
        buf: Vec::with_capacity(rows.len()),
    };
    let root = if rows.is_empty() {
        Node::Leaf { value: 0.0, n_samples: 0 }
    } else {
        b.node(&mut rows, 0)
    };
    Tree { root, importances: b.importances }
}

/// Fits a single classification tree on all rows and features.
pub fn fit_classifier(cols: &Columns, y: &[u8], params: &TreeParams, rng: &mut ChaCha8Rng) -> Tree {
    let target = ClassTarget { y, criterion: params.criterion };
    let features: Vec<usize> = (0..cols.n_features()).collect();
    grow(cols, &target, (0..cols.n_rows).collect(), &features, params, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn max_features_resolution() {
        assert_eq!(MaxFeatures::Sqrt.resolve(10), 3);
        assert_eq!(MaxFeatures::Sqrt.resolve(7), 2);
        assert_eq!(MaxFeatures::Log2.resolve(7), 2);
        assert_eq!(MaxFeatures::Log2.resolve(1), 1);
        assert_eq!(MaxFeatures::Fraction(0.8).resolve(7), 5);
        assert_eq!(MaxFeatures::Count(20).resolve(7), 7);
    }

    #[test]
    fn single_label_gives_single_leaf() {
        let cols = Columns::from_rows(&[0.0, 1.0, 2.0, 3.0], 1);
        let t = fit_classifier(&cols, &[1, 1, 1, 1], &TreeParams::default(), &mut rng());
        assert_eq!(t.root, Node::Leaf { value: 1.0, n_samples: 4 });
    }

    #[test]
    fn threshold_is_midpoint() {
        let cols = Columns::from_rows(&[0.0, 1.0, 3.0, 4.0], 1);
        let t = fit_classifier(&cols, &[0, 0, 1, 1], &TreeParams::default(), &mut rng());
        match t.root {
            Node::Split { feature: 0, threshold, .. } => assert_eq!(threshold, 2.0),
            ref other => panic!("{other:?}"),
        }
        assert_eq!(t.predict(&[1.9]), 0.0);
        assert_eq!(t.predict(&[2.1]), 1.0);
        assert_eq!(t.importances, vec![0.5]);
    }

    #[test]
    fn entropy_importance_is_information_gain() {
        let cols = Columns::from_rows(&[0.0, 1.0, 3.0, 4.0], 1);
        let p = TreeParams { criterion: Criterion::Entropy, ..TreeParams::default() };
        let t = fit_classifier(&cols, &[0, 0, 1, 1], &p, &mut rng());
        assert_eq!(t.importances, vec![1.0]);
    }

    #[test]
    fn depth_and_leaf_limits() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let cols = Columns::from_rows(&x, 1);
        let p = TreeParams { max_depth: Some(2), ..TreeParams::default() };
        assert!(fit_classifier(&cols, &y, &p, &mut rng()).root.depth() <= 2);
        let p = TreeParams { min_samples_leaf: 5, ..TreeParams::default() };
        let t = fit_classifier(&cols, &y, &p, &mut rng());
        fn check(n: &Node) {
            match n {
                Node::Leaf { n_samples, .. } => assert!(*n_samples >= 5),
                Node::Split { left, right, .. } => {
                    check(left);
                    check(right);
                }
            }
        }
        check(&t.root);
        let full = fit_classifier(&cols, &y, &TreeParams::default(), &mut rng());
        assert!(x.iter().zip(&y).all(|(&v, &l)| full.predict(&[v]) == l as f64));
    }

    #[test]
    fn random_splitter_separates_clusters() {
        let x = [0.0, 0.1, 0.2, 5.0, 5.1, 5.2];
        let y = [0, 0, 0, 1, 1, 1];
        let cols = Columns::from_rows(&x, 1);
        let p = TreeParams { splitter: Splitter::Random, ..TreeParams::default() };
        let t = fit_classifier(&cols, &y, &p, &mut rng());
        assert!(x.iter().zip(&y).all(|(&v, &l)| t.predict(&[v]) == l as f64));
    }

    #[test]
    fn regression_leaves_use_rule() {
        let cols = Columns::from_rows(&[0.0, 1.0, 2.0, 3.0], 1);
        let r = [1.0, 1.0, 5.0, 5.0];
        let target = RegTarget { r: &r, leaf: |rows: &[usize]| rows.iter().map(|&i| r[i]).sum::<f64>() / rows.len() as f64 };
        let t = grow(&cols, &target, vec![0, 1, 2, 3], &[0], &TreeParams::default(), &mut rng());
        assert_eq!(t.predict(&[0.5]), 1.0);
        assert_eq!(t.predict(&[2.5]), 5.0);
    }
}
