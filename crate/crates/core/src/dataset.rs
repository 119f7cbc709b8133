//! Labeled sample tables: assembly from segmented frames, stratified
//! splitting, spatial-feature ablation, CSV interchange and per-class
//! distribution statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{csv_text, fmt_f64};
use crate::mpsample::MeltPoolSample;
use crate::segment::Blob;

pub const FEATURE_NAMES: [&str; 10] = ["x", "y", "z", "vx", "vy", "vz", "vmag", "T", "rho", "p"];
pub const SPATIAL_FEATURES: [&str; 3] = ["x", "y", "z"];
pub const NON_SPATIAL_FEATURES: [&str; 7] = ["vx", "vy", "vz", "vmag", "T", "rho", "p"];
pub const LABEL_COLUMN: &str = "label";
pub const VMAG_REL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Meltpool,
    Spatter,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Meltpool => 0,
            Label::Spatter => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::Meltpool),
            1 => Some(Label::Spatter),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Meltpool => "meltpool",
            Label::Spatter => "spatter",
        }
    }
}

/// One labeled observation with all ten physical features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// µm
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// m/s
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub vmag: f64,
    /// K
    #[serde(rename = "T")]
    pub t: f64,
    /// kg/m³
    pub rho: f64,
    /// Pa
    pub p: f64,
    pub label: Label,
}

impl SampleRecord {
    pub fn from_blob(blob: &Blob<f64>) -> Self {
        let c = blob.centroid;
        let u = blob.mean_u;
        SampleRecord {
            x: c.x,
            y: c.y,
            z: c.z,
            vx: u.x,
            vy: u.y,
            vz: u.z,
            vmag: u.norm(),
            t: blob.mean_t,
            rho: blob.mean_rho,
            p: blob.mean_p,
            label: Label::Spatter,
        }
    }

    pub fn from_meltpool(s: &MeltPoolSample<f64>) -> Self {
        SampleRecord {
            x: s.position.x,
            y: s.position.y,
            z: s.position.z,
            vx: s.mean_u.x,
            vy: s.mean_u.y,
            vz: s.mean_u.z,
            vmag: s.mean_u.norm(),
            t: s.mean_t,
            rho: s.mean_rho,
            p: s.mean_p,
            label: Label::Meltpool,
        }
    }

    pub fn features(&self) -> [f64; 10] {
        [self.x, self.y, self.z, self.vx, self.vy, self.vz, self.vmag, self.t, self.rho, self.p]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub run_id: String,
    pub seed: Option<u64>,
    pub n_spatter: usize,
    pub n_meltpool: usize,
}

/// Row-major feature table with binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    /// `n_rows * feature_names.len()` values.
    pub features: Vec<f64>,
    pub labels: Vec<Label>,
    #[serde(default)]
    pub provenance: Vec<RunProvenance>,
}

/// Segmented output of one frame, as consumed by [`assemble`].
#[derive(Clone, Debug)]
pub struct FrameSamples {
    pub run_id: String,
    pub seed: Option<u64>,
    pub frame: usize,
    /// Blobs whose trajectory starts in this frame.
    pub new_spatter: Vec<Blob<f64>>,
    pub meltpool: Vec<MeltPoolSample<f64>>,
}

impl Dataset {
    pub fn empty(feature_names: &[&str]) -> Self {
        Dataset {
            feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
            features: Vec::new(),
            labels: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn from_records(records: &[SampleRecord]) -> Self {
        let mut ds = Self::empty(&FEATURE_NAMES);
        for r in records {
            ds.features.extend_from_slice(&r.features());
            ds.labels.push(r.label);
        }
        ds
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.n_features().max(1)).take(self.n_rows())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Label codes: 1 for spatter, 0 for melt pool.
    pub fn targets(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    /// `(meltpool, spatter)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let s = self.labels.iter().filter(|&&l| l == Label::Spatter).count();
        (self.n_rows() - s, s)
    }

    pub fn has_spatial(&self) -> bool {
        SPATIAL_FEATURES.iter().all(|f| self.feature_index(f).is_some())
    }

    /// Rows at `indices`, in the given order, sharing provenance.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Dataset {
            feature_names: self.feature_names.clone(),
            features: Vec::with_capacity(indices.len() * self.n_features()),
            labels: Vec::with_capacity(indices.len()),
            provenance: self.provenance.clone(),
        };
        for &i in indices {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Appends rows of another dataset with the same columns.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.feature_names != self.feature_names {
            return Err(Error::FeatureMismatch {
                expected: self.feature_names.clone(),
                found: other.feature_names.clone(),
            });
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        self.provenance.extend(other.provenance.iter().cloned());
        Ok(())
    }

    /// Checks shape, finiteness and the `vmag` identity.
    pub fn check(&self) -> Result<()> {
        if self.features.len() != self.n_rows() * self.n_features() {
            return Err(Error::InvalidParameter(format!(
                "feature table has {} values for {} rows x {} features",
                self.features.len(),
                self.n_rows(),
                self.n_features()
            )));
        }
        for (i, row) in self.rows().enumerate() {
            check_row(&self.feature_names, row).map_err(|reason| Error::InvalidParameter(format!("row {i}: {reason}")))?;
        }
        Ok(())
    }
}

fn check_row(names: &[String], row: &[f64]) -> std::result::Result<(), String> {
    if let Some(j) = row.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite value in `{}`", names[j]));
    }
    let idx = |n: &str| names.iter().position(|f| f == n);
    if let (Some(a), Some(b), Some(c), Some(m)) = (idx("vx"), idx("vy"), idx("vz"), idx("vmag")) {
        let expect = (row[a] * row[a] + row[b] * row[b] + row[c] * row[c]).sqrt();
        if (row[m] - expect).abs() > VMAG_REL_TOL * expect.max(1e-300) {
            return Err(format!("vmag {} inconsistent with velocity components ({expect})", row[m]));
        }
    }
    Ok(())
}

/// Pairs each newly born spatter blob with one melt-pool sample from the
/// same frame.
pub fn assemble(frames: &[FrameSamples]) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut runs: BTreeMap<String, RunProvenance> = BTreeMap::new();
    for f in frames {
        if f.new_spatter.len() != f.meltpool.len() {
            return Err(Error::Imbalance {
                run: f.run_id.clone(),
                frame: f.frame,
                spatter: f.new_spatter.len(),
                meltpool: f.meltpool.len(),
            });
        }
        records.extend(f.new_spatter.iter().map(SampleRecord::from_blob));
        records.extend(f.meltpool.iter().map(SampleRecord::from_meltpool));
        let run = runs
            .entry(f.run_id.clone())
            .or_insert_with(|| RunProvenance { run_id: f.run_id.clone(), seed: f.seed, ..Default::default() });
        run.n_spatter += f.new_spatter.len();
        run.n_meltpool += f.meltpool.len();
    }
    let mut ds = Dataset::from_records(&records);
    // keep first-seen run order
    let mut order: Vec<&str> = Vec::new();
    for f in frames {
        if !order.contains(&f.run_id.as_str()) {
            order.push(&f.run_id);
        }
    }
    ds.provenance = order.into_iter().map(|r| runs[r].clone()).collect();
    Ok(ds)
}

/// Number of test rows for a train fraction.
pub fn test_size(n: usize, train_frac: f64) -> usize {
    // the epsilon absorbs representation error such as 0.3 * 10 = 3.0000000000000004
    let raw = (1.0 - train_frac) * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Stratified train/test partition as sorted row indices.
pub fn split_indices(labels: &[Label], train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidParameter(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    let n = labels.len();
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        classes[l.code() as usize].push(i);
    }
    for (c, members) in classes.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "class `{}` has {} record(s); splitting needs at least 2",
                Label::from_code(c as u8).unwrap().name(),
                members.len()
            )));
        }
    }
    let n_test = test_size(n, train_frac);
    // floor of each class's share, then largest remainder (spatter first on ties)
    let share = |c: usize| n_test as f64 * classes[c].len() as f64 / n as f64;
    let mut quota = [share(0).floor() as usize, share(1).floor() as usize];
    let mut left = n_test - quota[0] - quota[1];
    let mut order = [1usize, 0];
    order.sort_by(|&a, &b| {
        let ra = share(a) - share(a).floor();
        let rb = share(b) - share(b).floor();
        rb.partial_cmp(&ra).unwrap().then(b.cmp(&a))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < classes[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, members) in classes.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..quota[c]]);
        train.extend_from_slice(&members[quota[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(&ds.labels, train_frac, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Removes the `x`, `y`, `z` columns.
pub fn drop_spatial(ds: &Dataset) -> Result<Dataset> {
    if !ds.has_spatial() {
        return Err(Error::InvalidParameter("dataset has no spatial columns to drop".into()));
    }
    let keep: Vec<usize> = (0..ds.n_features()).filter(|&j| !SPATIAL_FEATURES.contains(&ds.feature_names[j].as_str())).collect();
    let mut out = Dataset {
        feature_names: keep.iter().map(|&j| ds.feature_names[j].clone()).collect(),
        features: Vec::with_capacity(ds.n_rows() * keep.len()),
        labels: ds.labels.clone(),
        provenance: ds.provenance.clone(),
    };
    for row in ds.rows() {
        out.features.extend(keep.iter().map(|&j| row[j]));
    }
    Ok(out)
}

pub fn to_csv_string(ds: &Dataset) -> String {
    let mut header: Vec<&str> = ds.feature_names.iter().map(|s| s.as_str()).collect();
    header.push(LABEL_COLUMN);
    csv_text(
        &header,
        ds.rows().zip(&ds.labels).map(|(row, l)| {
            let mut cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            cells.push(l.code().to_string());
            cells
        }),
    )
}

pub fn to_csv(ds: &Dataset, path: &Path) -> Result<()> {
    crate::io_util::write_atomic(path, to_csv_string(ds).as_bytes())
}

pub fn from_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv_str(&text, &path.display().to_string())
}

/// Parses dataset CSV; `source` names the input in error messages.
pub fn from_csv_str(text: &str, source: &str) -> Result<Dataset> {
    let err = |line: u64, reason: String| Error::Csv { path: source.to_string(), line, reason };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let Some((&last, names)) = cols.split_last() else {
        return Err(err(1, "empty header".into()));
    };
    if last != LABEL_COLUMN {
        return Err(err(1, format!("last column must be `{LABEL_COLUMN}`, found `{last}`")));
    }
    if let Some(bad) = names.iter().find(|n| !FEATURE_NAMES.contains(n)) {
        return Err(err(1, format!("unknown column `{bad}`")));
    }
    if names != FEATURE_NAMES.as_slice() && names != NON_SPATIAL_FEATURES.as_slice() {
        return Err(err(1, format!("columns {names:?} are not in canonical order {FEATURE_NAMES:?} or {NON_SPATIAL_FEATURES:?}")));
    }
    let mut ds = Dataset::empty(names);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(err(line, format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let start = ds.features.len();
        for (j, cell) in rec.iter().take(names.len()).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| err(line, format!("`{}`: cannot parse `{cell}`", names[j])))?;
            ds.features.push(v);
        }
        check_row(&ds.feature_names, &ds.features[start..]).map_err(|r| err(line, r))?;
        let code = rec[names.len()].trim();
        let label = code.parse::<u8>().ok().and_then(Label::from_code).ok_or_else(|| err(line, format!("label must be 0 or 1, found `{code}`")))?;
        ds.labels.push(label);
    }
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KdeBandwidth {
    Value(f64),
    Named(BandwidthRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Auto,
}

impl Default for KdeBandwidth {
    fn default() -> Self {
        KdeBandwidth::Named(BandwidthRule::Auto)
    }
}

pub const KDE_POINTS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: Label,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
    pub degenerate: bool,
    pub kde_bandwidth: Option<f64>,
    pub kde_values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: String,
    pub bin_edges: Vec<f64>,
    pub kde_grid: Vec<f64>,
    pub classes: Vec<ClassStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub bins: usize,
    pub features: Vec<FeatureStats>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule of thumb: `0.9 min(σ, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let (_, std) = mean_std(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    0.9 * spread * (values.len() as f64).powf(-0.2)
}

/// Gaussian kernel density of `values` evaluated at `grid`.
pub fn gaussian_kde(values: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / bandwidth).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Per-feature, per-class histograms and kernel density curves over a
/// shared range.
pub fn feature_stats(ds: &Dataset, bins: usize, bandwidth: KdeBandwidth) -> Result<StatsReport> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset has no records".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be positive".into()));
    }
    if let KdeBandwidth::Value(h) = bandwidth {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("KDE bandwidth must be positive, got {h}")));
        }
    }
    let features = (0..ds.n_features())
        .into_par_iter()
        .map(|j| {
            let col = ds.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
            let width = (hi - lo) / bins as f64;
            let bin_edges: Vec<f64> = (0..=bins).map(|b| if b == bins { hi } else { lo + width * b as f64 }).collect();
            let kde_grid: Vec<f64> = (0..KDE_POINTS).map(|g| lo + (hi - lo) * g as f64 / (KDE_POINTS - 1) as f64).collect();
            let classes = [Label::Meltpool, Label::Spatter]
                .into_iter()
                .filter_map(|label| {
                    let vals: Vec<f64> = col.iter().zip(&ds.labels).filter(|(_, &l)| l == label).map(|(&v, _)| v).collect();
                    if vals.is_empty() {
                        return None;
                    }
                    let mut counts = vec![0usize; bins];
                    for &v in &vals {
                        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
                        counts[b] += 1;
                    }
                    let (mean, std) = mean_std(&vals);
                    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let degenerate = !(max > min);
                    let h = match bandwidth {
                        _ if degenerate => None,
                        KdeBandwidth::Value(h) => Some(h),
                        KdeBandwidth::Named(BandwidthRule::Auto) => Some(silverman_bandwidth(&vals)).filter(|h| *h > 0.0),
                    };
                    let kde_values = h.map(|h| gaussian_kde(&vals, h, &kde_grid));
                    Some(ClassStats {
                        label,
                        count: vals.len(),
                        mean,
                        std,
                        min,
                        max,
                        counts,
                        degenerate: h.is_none(),
                        kde_bandwidth: h,
                        kde_values,
                    })
                })
                .collect();
            FeatureStats { feature: ds.feature_names[j].clone(), bin_edges, kde_grid, classes }
        })
        .collect();
    Ok(StatsReport { bins, features })
}

/// Seeded row subsample (without replacement) for pairwise scatter plots.
pub fn pairs_subsample(ds: &Dataset, max_rows: usize, seed: u64) -> Dataset {
    if ds.n_rows() <= max_rows {
        return ds.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, ds.n_rows(), max_rows).into_vec();
    idx.sort_unstable();
    ds.subset(&idx)
}
