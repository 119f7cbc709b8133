//! Melt-pool identification, surface extraction and region-averaged
//! surface sampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldstore::FieldBundle;
use crate::geom::Vec3;
use crate::num::Real;
use crate::segment::Blob;

pub const LIQUID_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CUBE_EDGE: usize = 3;

/// Melt-pool membership over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MeltPool {
    pub member: Vec<bool>,
    /// Flat indices of member cells in ascending order.
    pub cells: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub index: [usize; 3],
    /// µm
    pub position: Vec3<f64>,
    pub alpha_g: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeltPoolSample<T> {
    /// Center of the chosen surface cell, µm.
    pub position: Vec3<T>,
    pub mean_u: Vec3<T>,
    pub speed: T,
    pub mean_t: T,
    pub mean_rho: T,
    pub mean_p: T,
    pub n_cells_used: usize,
}

#[inline]
pub(crate) fn is_meltpool_cell(bundle: &FieldBundle, idx: usize) -> bool {
    f64::from(bundle.alpha_g[idx]) <= LIQUID_THRESHOLD && f64::from(bundle.alpha_l[idx]) > LIQUID_THRESHOLD
}

/// Metal cells (`alpha_g <= 0.5`) with `alpha_l > 0.5`, optionally restricted
/// to the composite blob from segmentation.
pub fn meltpool_mask<T>(bundle: &FieldBundle, composite: Option<&Blob<T>>) -> Result<MeltPool> {
    let n = bundle.n_cells();
    let mut member: Vec<bool> = (0..n).map(|idx| is_meltpool_cell(bundle, idx)).collect();
    if let Some(blob) = composite {
        let mut inside = vec![false; n];
        for &[i, j, k] in &blob.cells {
            inside[bundle.meta.flatten(i as usize, j as usize, k as usize)] = true;
        }
        for (m, c) in member.iter_mut().zip(inside) {
            *m &= c;
        }
    }
    let cells: Vec<usize> = (0..n).filter(|&i| member[i]).collect();
    if cells.is_empty() {
        return Err(Error::Empty("no melt-pool cells (alpha_g <= 0.5 and alpha_l > 0.5)".into()));
    }
    Ok(MeltPool { member, cells })
}

/// One surface cell per `(i, j)` column crossing the melt pool: the member
/// cell with the highest `alpha_g`, ties resolved toward higher `k`.
/// Columns are reported in scan order (i fastest).
pub fn surface_cells(mp: &MeltPool, bundle: &FieldBundle) -> Vec<SurfaceCell> {
    let meta = &bundle.meta;
    let [nx, ny, _] = meta.dims;
    let mut best: Vec<Option<usize>> = vec![None; nx * ny];
    // Ascending flat order visits k upward, so `>=` keeps the highest k on ties.
    for &idx in &mp.cells {
        let col = idx % (nx * ny);
        let a = bundle.alpha_g[idx];
        match best[col] {
            Some(b) if a < bundle.alpha_g[b] => {}
            _ => best[col] = Some(idx),
        }
    }
    best.into_iter()
        .flatten()
        .map(|idx| {
            let [i, j, k] = meta.unflatten(idx);
            SurfaceCell { index: [i, j, k], position: meta.cell_center(i, j, k), alpha_g: bundle.alpha_g[idx] }
        })
        .collect()
}

/// Averages fields over melt-pool cells of the `n_r`-edge cube centered
/// at `center` (clipped to the grid).
pub fn cube_average<T: Real>(bundle: &FieldBundle, mp: &MeltPool, center: [usize; 3], n_r: usize) -> MeltPoolSample<T> {
    let meta = &bundle.meta;
    let h = n_r / 2;
    let range = |c: usize, n: usize| c.saturating_sub(h)..(c + h + 1).min(n);
    let f = |v: f32| T::lit(f64::from(v));
    let mut u = Vec3::<T>::zero();
    let (mut t, mut rho, mut p) = (T::zero(), T::zero(), T::zero());
    let mut count = 0usize;
    for k in range(center[2], meta.dims[2]) {
        for j in range(center[1], meta.dims[1]) {
            for i in range(center[0], meta.dims[0]) {
                let idx = meta.flatten(i, j, k);
                if !mp.member[idx] {
                    continue;
                }
                count += 1;
                u += Vec3::new(f(bundle.velocity[0][idx]), f(bundle.velocity[1][idx]), f(bundle.velocity[2][idx]));
                t = t + f(bundle.temperature[idx]);
                rho = rho + f(bundle.density[idx]);
                p = p + f(bundle.pressure[idx]);
            }
        }
    }
    let n = T::count(count.max(1));
    let mean_u = u / n;
    MeltPoolSample {
        position: meta.cell_center(center[0], center[1], center[2]).cast(),
        mean_u,
        speed: mean_u.norm(),
        mean_t: t / n,
        mean_rho: rho / n,
        mean_p: p / n,
        n_cells_used: count,
    }
}

/// Draws `n_samples` surface cells under `seed` (without replacement when
/// possible) and averages each over its bounding cube.
pub fn sample_surface<T: Real>(
    bundle: &FieldBundle,
    mp: &MeltPool,
    surface: &[SurfaceCell],
    n_r: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<MeltPoolSample<T>>> {
    if n_r == 0 || n_r % 2 == 0 {
        return Err(Error::InvalidParameter(format!("cube edge n_r must be odd and >= 1, got {n_r}")));
    }
    if surface.is_empty() {
        return Err(Error::Empty("melt-pool surface has no cells".into()));
    }
    if surface.iter().any(|s| !mp.member[bundle.meta.flatten(s.index[0], s.index[1], s.index[2])]) {
        return Err(Error::InvalidParameter("surface cell outside the melt pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n_samples <= surface.len() {
        index::sample(&mut rng, surface.len(), n_samples).into_vec()
    } else {
        (0..n_samples).map(|_| rng.random_range(0..surface.len())).collect()
    };
    Ok(picks.into_iter().map(|s| cube_average(bundle, mp, surface[s].index, n_r)).collect())
}
