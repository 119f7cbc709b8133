//! Metal masking, connected-component labeling and blob classification.
//!
//! Cells with `alpha_g <= threshold` are metal. Metal cells are grouped by
//! union-find under 6-, 18- or 26-connectivity; the largest group is the
//! melt-pool/powder-bed composite and the remaining groups of at least
//! `min_cells` cells are spatter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldstore::{FieldBundle, GridMeta};
use crate::geom::Vec3;
use crate::io_util::fmt_f64;
use crate::num::Real;
use crate::unionfind::UnionFind;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_CELLS: usize = 8;

/// Binary metal mask over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMask {
    pub meta: GridMeta,
    pub bits: Vec<bool>,
}

impl PhaseMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    #[default]
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;
    fn try_from(n: u8) -> Result<Self> {
        match n {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(Error::InvalidParameter(format!("connectivity must be 6, 18 or 26, got {n}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbor offsets that precede a cell in scan order (x fastest).
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let max_l1 = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dk in -1..=1i64 {
            for dj in -1..=1i64 {
                for di in -1..=1i64 {
                    let l1 = di.abs() + dj.abs() + dk.abs();
                    let backward = dk < 0 || (dk == 0 && (dj < 0 || (dj == 0 && di < 0)));
                    if l1 > 0 && l1 <= max_l1 && backward {
                        out.push([di, dj, dk]);
                    }
                }
            }
        }
        out
    }
}

/// A connected set of metal cells with its label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    /// Flat cell indices in ascending order.
    pub cells: Vec<usize>,
}

/// Labeled field (0 = background) plus the components in label order.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeling {
    pub meta: GridMeta,
    pub labels: Vec<u32>,
    /// `components[l - 1]` carries label `l`.
    pub components: Vec<Component>,
}

impl Labeling {
    pub fn labels_bytes(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|l| l.to_le_bytes()).collect()
    }
}

/// Aggregated properties of a connected set of metal cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob<T> {
    pub id: u32,
    pub cells: Vec<[u32; 3]>,
    pub n_cells: usize,
    /// µm³
    pub volume: T,
    /// µm
    pub centroid: Vec3<T>,
    /// m/s
    pub mean_u: Vec3<T>,
    pub speed: T,
    pub mean_t: T,
    pub mean_rho: T,
    pub mean_p: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult<T> {
    pub composite: Blob<T>,
    /// Spatter blobs, largest first.
    pub spatter: Vec<Blob<T>>,
    pub dropped_small: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentParams {
    pub threshold: f64,
    pub connectivity: Connectivity,
    pub min_cells: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, connectivity: Connectivity::Six, min_cells: DEFAULT_MIN_CELLS }
    }
}

/// Marks metal cells: `alpha_g <= threshold` (the boundary counts as metal).
pub fn binarize(bundle: &FieldBundle, threshold: f64) -> Result<PhaseMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let bits = bundle.alpha_g.iter().map(|&a| f64::from(a) <= threshold).collect();
    Ok(PhaseMask { meta: bundle.meta.clone(), bits })
}

fn union_neighbors(
    mask: &[bool],
    uf: &mut UnionFind,
    dims: [usize; 3],
    offsets: &[[i64; 3]],
    k_range: std::ops::Range<usize>,
    k_floor: usize,
    base: usize,
) {
    let [nx, ny, _] = dims;
    let plane = nx * ny;
    for k in k_range {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * j + plane * k;
                if !mask[idx] {
                    continue;
                }
                for &[di, dj, dk] in offsets {
                    let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    if ni < 0 || nj < 0 || nk < k_floor as i64 || ni >= nx as i64 || nj >= ny as i64 {
                        continue;
                    }
                    let nidx = ni as usize + nx * nj as usize + plane * nk as usize;
                    if mask[nidx] {
                        uf.union((idx - base) as u32, (nidx - base) as u32);
                    }
                }
            }
        }
    }
}

/// Labels connected metal components.
///
/// The grid is cut into z-slabs labeled independently (in parallel when a
/// rayon pool is available) and stitched across slab faces. Labels are then
/// renumbered canonically: descending size, ties by first cell in scan
/// order. The output therefore does not depend on the slab count.
pub fn label_components(mask: &PhaseMask, connectivity: Connectivity) -> Labeling {
    let slabs = rayon::current_num_threads().max(1);
    label_components_with_slabs(mask, connectivity, slabs)
}

/// As [`label_components`] with an explicit slab count.
pub fn label_components_with_slabs(mask: &PhaseMask, connectivity: Connectivity, slabs: usize) -> Labeling {
    let dims = mask.meta.dims;
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let n = mask.meta.n_cells();
    let offsets = connectivity.backward_offsets();
    let slabs = slabs.clamp(1, nz);
    let per = nz.div_ceil(slabs);
    let bounds: Vec<(usize, usize)> = (0..slabs)
        .map(|s| (s * per, ((s + 1) * per).min(nz)))
        .filter(|(a, b)| a < b)
        .collect();

    // Per-slab labeling; each slab reports a representative (global flat
    // index) for every one of its cells.
    let mut rep = vec![0u32; n];
    rep.par_chunks_mut(per * plane).zip(bounds.par_iter()).for_each(|(out, &(k0, k1))| {
        let base = k0 * plane;
        let mut uf = UnionFind::new((k1 - k0) * plane);
        union_neighbors(&mask.bits, &mut uf, dims, &offsets, k0..k1, k0, base);
        for (local, r) in out.iter_mut().enumerate() {
            *r = (base + uf.find(local as u32) as usize) as u32;
        }
    });

    let mut uf = UnionFind::new(n);
    for (idx, &r) in rep.iter().enumerate() {
        if mask.bits[idx] && r as usize != idx {
            uf.union(r, idx as u32);
        }
    }
    drop(rep);
    // Stitch each slab's first plane to the plane below it.
    for &(k0, _) in bounds.iter().skip(1) {
        union_neighbors(&mask.bits, &mut uf, dims, &offsets, k0..k0 + 1, k0 - 1, 0);
    }

    // Canonical numbering.
    let mut provisional = vec![u32::MAX; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut labels = vec![0u32; n];
    for idx in 0..n {
        if !mask.bits[idx] {
            continue;
        }
        let root = uf.find(idx as u32) as usize;
        if provisional[root] == u32::MAX {
            provisional[root] = groups.len() as u32;
            groups.push(Vec::new());
        }
        let g = provisional[root] as usize;
        groups[g].push(idx);
        labels[idx] = g as u32;
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| groups[b].len().cmp(&groups[a].len()).then(a.cmp(&b)));
    let mut rank = vec![0u32; groups.len()];
    for (r, &g) in order.iter().enumerate() {
        rank[g] = r as u32 + 1;
    }
    for idx in 0..n {
        if mask.bits[idx] {
            labels[idx] = rank[labels[idx] as usize];
        }
    }
    let mut slots: Vec<Option<Vec<usize>>> = groups.into_iter().map(Some).collect();
    let components = order
        .iter()
        .enumerate()
        .map(|(r, &g)| Component { label: r as u32 + 1, cells: slots[g].take().expect("each group once") })
        .collect();
    Labeling { meta: mask.meta.clone(), labels, components }
}

/// Aggregates field values over `cells` (flat indices).
pub fn blob_properties<T: Real>(bundle: &FieldBundle, id: u32, cells: &[usize]) -> Result<Blob<T>> {
    if cells.is_empty() {
        return Err(Error::Empty("blob has no cells".into()));
    }
    let meta = &bundle.meta;
    let mut center = Vec3::<T>::zero();
    let mut u = Vec3::<T>::zero();
    let (mut t, mut rho, mut p) = (T::zero(), T::zero(), T::zero());
    let mut ijk = Vec::with_capacity(cells.len());
    let f = |v: f32| T::lit(f64::from(v));
    for &idx in cells {
        let [i, j, k] = meta.unflatten(idx);
        ijk.push([i as u32, j as u32, k as u32]);
        let c = meta.cell_center(i, j, k);
        center += Vec3::new(T::lit(c.x), T::lit(c.y), T::lit(c.z));
        u += Vec3::new(f(bundle.velocity[0][idx]), f(bundle.velocity[1][idx]), f(bundle.velocity[2][idx]));
        t = t + f(bundle.temperature[idx]);
        rho = rho + f(bundle.density[idx]);
        p = p + f(bundle.pressure[idx]);
    }
    let n = T::count(cells.len());
    let mean_u = u / n;
    Ok(Blob {
        id,
        n_cells: cells.len(),
        cells: ijk,
        volume: n * T::lit(meta.cell_volume_um3()),
        centroid: center / n,
        mean_u,
        speed: mean_u.norm(),
        mean_t: t / n,
        mean_rho: rho / n,
        mean_p: p / n,
    })
}

/// Splits components into the composite (largest; ties broken by the
/// earliest cell in scan order) and spatter blobs of at least `min_cells`.
pub fn classify_blobs<T: Real>(
    components: &[Component],
    bundle: &FieldBundle,
    min_cells: usize,
) -> Result<SegmentationResult<T>> {
    let first_cell = |c: &Component| c.cells.iter().copied().min().unwrap_or(usize::MAX);
    let mut order: Vec<&Component> = components.iter().filter(|c| !c.cells.is_empty()).collect();
    if order.is_empty() {
        return Err(Error::Empty("no metal cells in domain".into()));
    }
    order.sort_by(|a, b| b.cells.len().cmp(&a.cells.len()).then(first_cell(a).cmp(&first_cell(b))));
    let composite = blob_properties(bundle, order[0].label, &order[0].cells)?;
    let mut spatter = Vec::new();
    let mut dropped_small = 0;
    for c in &order[1..] {
        if c.cells.len() >= min_cells {
            spatter.push(blob_properties(bundle, c.label, &c.cells)?);
        } else {
            dropped_small += 1;
        }
    }
    Ok(SegmentationResult { composite, spatter, dropped_small })
}

/// Runs binarize, labeling and classification with `params`.
pub fn segment<T: Real>(bundle: &FieldBundle, params: &SegmentParams) -> Result<(Labeling, SegmentationResult<T>)> {
    let mask = binarize(bundle, params.threshold)?;
    let labeling = label_components(&mask, params.connectivity);
    let result = classify_blobs(&labeling.components, bundle, params.min_cells)?;
    Ok((labeling, result))
}

pub const BLOBS_CSV_HEADER: [&str; 14] =
    ["id", "kind", "n_cells", "volume_um3", "cx_um", "cy_um", "cz_um", "ux", "uy", "uz", "speed", "T", "rho", "p"];

/// `blobs.csv` text: the composite first, then spatter blobs.
pub fn blobs_csv<T: Real>(result: &SegmentationResult<T>) -> String {
    let row = |b: &Blob<T>, kind: &str| {
        let mut r = vec![b.id.to_string(), kind.to_string(), b.n_cells.to_string()];
        r.extend(
            [
                b.volume,
                b.centroid.x,
                b.centroid.y,
                b.centroid.z,
                b.mean_u.x,
                b.mean_u.y,
                b.mean_u.z,
                b.speed,
                b.mean_t,
                b.mean_rho,
                b.mean_p,
            ]
            .iter()
            .map(|v| fmt_f64(v.as_f64())),
        );
        r
    };
    let rows = std::iter::once(row(&result.composite, "composite"))
        .chain(result.spatter.iter().map(|b| row(b, "spatter")));
    crate::io_util::csv_text(&BLOBS_CSV_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldstore::{test_liquid_cell, CellRecord};

    fn mask_from(dims: [usize; 3], on: &[[usize; 3]]) -> PhaseMask {
        let meta = GridMeta::new(dims, [1.0; 3], [0.0; 3], 0.0).unwrap();
        let mut bits = vec![false; meta.n_cells()];
        for &[i, j, k] in on {
            bits[meta.flatten(i, j, k)] = true;
        }
        PhaseMask { meta, bits }
    }

    fn gas() -> CellRecord {
        CellRecord { alpha_g: 1.0, alpha_l: 0.0, ..test_liquid_cell() }
    }

    #[test]
    fn binarize_boundary_is_metal() {
        let meta = GridMeta::new([3, 1, 1], [1.0; 3], [0.0; 3], 0.0).unwrap();
        let mut b = FieldBundle::filled(meta, gas());
        assert_eq!(binarize(&b, 0.5).unwrap().count(), 0);
        b.alpha_g[1] = 0.5;
        b.alpha_g[2] = 0.500001;
        assert_eq!(binarize(&b, 0.5).unwrap().bits, vec![false, true, false]);
        assert!(binarize(&b, 1.0).is_err());
    }

    #[test]
    fn all_metal_cube_is_one_component() {
        let all: Vec<[usize; 3]> = (0..8).map(|n| [n & 1, (n >> 1) & 1, n >> 2]).collect();
        let l = label_components(&mask_from([2, 2, 2], &all), Connectivity::Six);
        assert_eq!(l.components.len(), 1);
        assert_eq!(l.components[0].cells.len(), 8);
    }

    #[test]
    fn adjacency_definitions() {
        // edge contact, corner contact
        for (b, c18) in [([1, 1, 0], 1), ([1, 1, 1], 2)] {
            let m = mask_from([2, 2, 2], &[[0, 0, 0], b]);
            assert_eq!(label_components(&m, Connectivity::Six).components.len(), 2);
            assert_eq!(label_components(&m, Connectivity::Eighteen).components.len(), c18);
            assert_eq!(label_components(&m, Connectivity::TwentySix).components.len(), 1);
        }
    }

    #[test]
    fn labels_sorted_by_size_then_scan_order() {
        let m = mask_from([5, 1, 1], &[[0, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0]]);
        let l = label_components(&m, Connectivity::Six);
        assert_eq!(l.labels, vec![2, 0, 1, 1, 1]);
        let m = mask_from([3, 1, 1], &[[0, 0, 0], [2, 0, 0]]);
        assert_eq!(label_components(&m, Connectivity::Six).labels, vec![1, 0, 2]);
    }

    #[test]
    fn slab_count_does_not_change_result() {
        let dims = [6, 5, 9];
        let mut on = Vec::new();
        let mut s = 12345u64;
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    if (s >> 33) % 2 == 0 {
                        on.push([i, j, k]);
                    }
                }
            }
        }
        let m = mask_from(dims, &on);
        for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let one = label_components_with_slabs(&m, conn, 1);
            for slabs in [2, 3, 4, 9, 20] {
                assert_eq!(label_components_with_slabs(&m, conn, slabs), one);
            }
        }
    }

    fn sized_components(sizes: &[usize]) -> (FieldBundle, Vec<Component>) {
        let total: usize = sizes.iter().sum::<usize>() + sizes.len();
        let meta = GridMeta::new([total, 1, 1], [2.0; 3], [0.0; 3], 0.0).unwrap();
        let bundle = FieldBundle::filled(meta, test_liquid_cell());
        let mut start = 0;
        let comps = sizes
            .iter()
            .enumerate()
            .map(|(n, &s)| {
                let c = Component { label: n as u32 + 1, cells: (start..start + s).collect() };
                start += s + 1;
                c
            })
            .collect();
        (bundle, comps)
    }

    #[test]
    fn classify_drops_small_and_picks_largest() {
        let (b, comps) = sized_components(&[1000, 12, 7]);
        let r = classify_blobs::<f64>(&comps, &b, 8).unwrap();
        assert_eq!(r.composite.n_cells, 1000);
        assert_eq!(r.spatter.iter().map(|s| s.n_cells).collect::<Vec<_>>(), vec![12]);
        assert_eq!(r.dropped_small, 1);

        let (b, comps) = sized_components(&[40]);
        let r = classify_blobs::<f64>(&comps, &b, 8).unwrap();
        assert!(r.spatter.is_empty());
        assert!(classify_blobs::<f64>(&[], &b, 8).is_err());
    }

    #[test]
    fn classify_tie_goes_to_lower_label() {
        let (b, comps) = sized_components(&[50, 50, 8]);
        let r = classify_blobs::<f64>(&comps, &b, 8).unwrap();
        assert_eq!(r.composite.id, 1);
        assert_eq!(r.spatter.iter().map(|s| (s.id, s.n_cells)).collect::<Vec<_>>(), vec![(2, 50), (3, 8)]);
    }

    #[test]
    fn blob_properties_means() {
        let meta = GridMeta::new([2, 1, 1], [2.0, 4.0, 6.0], [10.0, 0.0, 0.0], 0.0).unwrap();
        let mut b = FieldBundle::filled(meta, test_liquid_cell());
        b.temperature = vec![1800.0, 2200.0];
        let one = blob_properties::<f64>(&b, 1, &[0]).unwrap();
        assert_eq!(one.centroid, Vec3::new(11.0, 2.0, 3.0));
        assert_eq!(one.mean_t, 1800.0);
        assert_eq!(one.volume, 48.0);
        let two = blob_properties::<f64>(&b, 1, &[0, 1]).unwrap();
        assert_eq!(two.mean_t, 2000.0);
        assert!((two.speed - (1.25f64).sqrt()).abs() < 1e-12);
        assert!(blob_properties::<f64>(&b, 1, &[]).is_err());
        let single = blob_properties::<f32>(&b, 1, &[0, 1]).unwrap();
        assert_eq!(single.mean_t, 2000.0f32);
    }

    #[test]
    fn blobs_csv_has_header_and_rows() {
        let (b, comps) = sized_components(&[20, 9]);
        let r = classify_blobs::<f64>(&comps, &b, 8).unwrap();
        let text = blobs_csv(&r);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], BLOBS_CSV_HEADER.join(","));
        assert!(lines[1].starts_with("1,composite,20,"));
        assert!(lines[2].starts_with("2,spatter,9,"));
    }
}
