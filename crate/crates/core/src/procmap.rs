//! Voxel-wise spatter flagging and power/velocity process-map screening.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::NON_SPATIAL_FEATURES;
use crate::error::{Error, Result};
use crate::fieldstore::FieldBundle;
use crate::io_util::{csv_text, fmt_f64, write_atomic, write_json};
use crate::learners::TrainedModel;
use crate::mpsample::{is_meltpool_cell, surface_cells, MeltPool};
use crate::synthgen::{surrogate_run, MaterialParams, ProcessParams, SurrogateConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct FlagResult {
    /// Flat indices of flagged cells, ascending.
    pub flagged: Vec<usize>,
    /// Cells that were classified.
    pub n_candidates: usize,
}

/// Classifies melt-pool cells (`alpha_g <= 0.5`, `alpha_l > 0.5`) with a
/// model trained on the seven non-spatial features; a cell is flagged when
/// its spatter probability exceeds `threshold`. With `surface_only`, only
/// the top melt-pool cell of each column is classified.
pub fn flag_spatter_cells(model: &TrainedModel, bundle: &FieldBundle, threshold: f64, surface_only: bool) -> Result<FlagResult> {
    if model.feature_names.iter().map(String::as_str).ne(NON_SPATIAL_FEATURES) {
        return Err(Error::FeatureMismatch {
            expected: NON_SPATIAL_FEATURES.iter().map(|s| s.to_string()).collect(),
            found: model.feature_names.clone(),
        });
    }
    let n = bundle.n_cells();
    let mut member = vec![false; n];
    let mut cells = Vec::new();
    for idx in 0..n {
        if is_meltpool_cell(bundle, idx) {
            member[idx] = true;
            cells.push(idx);
        }
    }
    if surface_only && !cells.is_empty() {
        let mut top: Vec<usize> = surface_cells(&MeltPool { member, cells }, bundle).iter().map(|s| bundle.meta.flatten(s.index[0], s.index[1], s.index[2])).collect();
        top.sort_unstable();
        cells = top;
    }
    let mut x = Vec::with_capacity(cells.len() * NON_SPATIAL_FEATURES.len());
    for &idx in &cells {
        let u = [bundle.velocity[0][idx], bundle.velocity[1][idx], bundle.velocity[2][idx]].map(f64::from);
        let vmag = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        x.extend_from_slice(&[
            u[0],
            u[1],
            u[2],
            vmag,
            f64::from(bundle.temperature[idx]),
            f64::from(bundle.density[idx]),
            f64::from(bundle.pressure[idx]),
        ]);
    }
    let proba = model.predict_rows(&x);
    let flagged = cells.iter().zip(&proba).filter(|(_, &p)| p > threshold).map(|(&c, _)| c).collect();
    Ok(FlagResult { flagged, n_candidates: cells.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessMapCell {
    pub power_w: f64,
    pub scan_speed_m_s: f64,
    /// Flagged cells times cell volume, summed over frames, µm³.
    pub spatter_volume_um3: f64,
    /// Flagged over classified melt-pool cells, all frames pooled.
    pub flagged_fraction: f64,
    pub frames_used: usize,
    pub meltpool_cells: usize,
    pub flagged_cells: usize,
}

impl ProcessMapCell {
    /// Linear energy density `P / v`, J/m.
    pub fn energy_density(&self) -> f64 {
        self.power_w / self.scan_speed_m_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    Values(Vec<f64>),
    Linspace { start: f64, stop: f64, n: usize },
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Axis::Values(v) => v.clone(),
            Axis::Linspace { start, stop, n } => match n {
                0 => Vec::new(),
                1 => vec![*start],
                n => (0..*n).map(|i| start + (stop - start) * i as f64 / (n - 1) as f64).collect(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenGrid {
    pub power_w: Axis,
    pub scan_speed_m_s: Axis,
    #[serde(default = "default_radius")]
    pub beam_radius_um: f64,
    #[serde(default = "default_absorptivity")]
    pub absorptivity: f64,
}

fn default_radius() -> f64 {
    ProcessParams::new(1.0, 1.0).beam_radius_um
}

fn default_absorptivity() -> f64 {
    ProcessParams::new(1.0, 1.0).absorptivity
}

impl ScreenGrid {
    /// Grid points, power-major.
    pub fn points(&self) -> Vec<ProcessParams> {
        let speeds = self.scan_speed_m_s.values();
        self.power_w
            .values()
            .into_iter()
            .flat_map(|p| {
                speeds.iter().map(move |&v| ProcessParams {
                    power_w: p,
                    scan_speed_m_s: v,
                    beam_radius_um: self.beam_radius_um,
                    absorptivity: self.absorptivity,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreenConfig {
    /// Surrogate settings shared by every grid point; its seed is replaced
    /// by one derived from `seed` and the point.
    pub surrogate: SurrogateConfig,
    pub threshold: f64,
    pub surface_only: bool,
    pub seed: u64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            // screened tracks carry no ejected droplets; only melt-pool
            // cells are classified
            surrogate: SurrogateConfig { spatter_rate: 0.0, frames: 3, spacing_um: 10.0, gas_um: 20.0, ..Default::default() },
            threshold: 0.5,
            surface_only: false,
            seed: 0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Surrogate seed of one grid point; equal points get equal seeds.
pub fn point_seed(seed: u64, params: &ProcessParams) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ params.power_w.to_bits()) ^ params.scan_speed_m_s.to_bits())
}

pub fn screen_point(params: &ProcessParams, model: &TrainedModel, mat: &MaterialParams, cfg: &ScreenConfig) -> Result<ProcessMapCell> {
    let surrogate = SurrogateConfig { seed: point_seed(cfg.seed, params), ..cfg.surrogate.clone() };
    let run = surrogate_run(params, mat, &surrogate)?;
    let (mut flagged, mut candidates) = (0, 0);
    let mut volume = 0.0;
    for b in &run.frames {
        let f = flag_spatter_cells(model, b, cfg.threshold, cfg.surface_only)?;
        flagged += f.flagged.len();
        candidates += f.n_candidates;
        volume += f.flagged.len() as f64 * b.meta.cell_volume_um3();
    }
    Ok(ProcessMapCell {
        power_w: params.power_w,
        scan_speed_m_s: params.scan_speed_m_s,
        spatter_volume_um3: volume,
        flagged_fraction: if candidates > 0 { flagged as f64 / candidates as f64 } else { 0.0 },
        frames_used: run.frames.len(),
        meltpool_cells: candidates,
        flagged_cells: flagged,
    })
}

/// One map cell per grid point, in grid order. Points run in parallel.
pub fn screen(grid: &[ProcessParams], model: &TrainedModel, mat: &MaterialParams, cfg: &ScreenConfig) -> Result<Vec<ProcessMapCell>> {
    if grid.is_empty() {
        return Err(Error::Empty("screening grid has no points".into()));
    }
    cfg.surrogate.check()?;
    grid.par_iter()
        .enumerate()
        .map(|(i, p)| {
            screen_point(p, model, mat, cfg)
                .map_err(|e| e.context(format!("grid point {i} ({} W, {} m/s)", p.power_w, p.scan_speed_m_s)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polyline {
    pub name: String,
    /// `(velocity m/s, power W)` vertices.
    pub points: Vec<[f64; 2]>,
}

/// Externally supplied regime boundaries drawn over the map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryOverlay {
    pub polylines: Vec<Polyline>,
}

impl BoundaryOverlay {
    pub fn check(&self) -> Result<()> {
        for l in &self.polylines {
            if l.points.len() < 2 || l.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("overlay `{}` needs at least 2 finite points", l.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    /// `speed`, `power` or `none`.
    pub fixed: String,
    pub fixed_value: Option<f64>,
    pub x: Vec<f64>,
    pub spatter_volume_um3: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trends {
    /// Volume against power, one curve per scan speed.
    pub vs_power: Vec<TrendCurve>,
    /// Volume against scan speed, one curve per power.
    pub vs_speed: Vec<TrendCurve>,
    /// Volume against linear energy density `P / v`.
    pub vs_energy_density: TrendCurve,
}

fn sorted_curve(fixed: &str, fixed_value: Option<f64>, mut pts: Vec<(f64, f64)>) -> TrendCurve {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    TrendCurve {
        fixed: fixed.into(),
        fixed_value,
        x: pts.iter().map(|p| p.0).collect(),
        spatter_volume_um3: pts.iter().map(|p| p.1).collect(),
    }
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub fn trend_curves(cells: &[ProcessMapCell]) -> Trends {
    let vs_power = distinct(cells.iter().map(|c| c.scan_speed_m_s))
        .into_iter()
        .map(|v| {
            let pts = cells.iter().filter(|c| c.scan_speed_m_s == v).map(|c| (c.power_w, c.spatter_volume_um3)).collect();
            sorted_curve("speed", Some(v), pts)
        })
        .collect();
    let vs_speed = distinct(cells.iter().map(|c| c.power_w))
        .into_iter()
        .map(|p| {
            let pts = cells.iter().filter(|c| c.power_w == p).map(|c| (c.scan_speed_m_s, c.spatter_volume_um3)).collect();
            sorted_curve("power", Some(p), pts)
        })
        .collect();
    let energy = sorted_curve("none", None, cells.iter().map(|c| (c.energy_density(), c.spatter_volume_um3)).collect());
    Trends { vs_power, vs_speed, vs_energy_density: energy }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantMeans {
    pub high_power_low_speed: f64,
    pub high_power_high_speed: f64,
    pub low_power_low_speed: f64,
    pub low_power_high_speed: f64,
}

impl QuadrantMeans {
    /// High power/low speed > high power/high speed > low power/low speed >
    /// low power/high speed.
    pub fn ordered(&self) -> bool {
        self.high_power_low_speed > self.high_power_high_speed
            && self.high_power_high_speed > self.low_power_low_speed
            && self.low_power_low_speed > self.low_power_high_speed
    }
}

/// Mean spatter volume per quadrant, splitting at the median of the
/// distinct powers and of the distinct speeds; cells exactly on a median
/// are left out.
pub fn quadrant_means(cells: &[ProcessMapCell]) -> Result<QuadrantMeans> {
    let median = |v: Vec<f64>| {
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
    };
    let powers = distinct(cells.iter().map(|c| c.power_w));
    let speeds = distinct(cells.iter().map(|c| c.scan_speed_m_s));
    if powers.len() < 2 || speeds.len() < 2 {
        return Err(Error::InvalidParameter("quadrants need at least two powers and two speeds".into()));
    }
    let (pm, vm) = (median(powers), median(speeds));
    let mean = |hp: bool, lv: bool| {
        let sel: Vec<f64> = cells
            .iter()
            .filter(|c| c.power_w != pm && c.scan_speed_m_s != vm)
            .filter(|c| (c.power_w > pm) == hp && (c.scan_speed_m_s < vm) == lv)
            .map(|c| c.spatter_volume_um3)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    Ok(QuadrantMeans {
        high_power_low_speed: mean(true, true),
        high_power_high_speed: mean(true, false),
        low_power_low_speed: mean(false, true),
        low_power_high_speed: mean(false, false),
    })
}

pub const MAP_CSV_HEADER: [&str; 8] =
    ["power", "velocity", "spatter_volume", "flagged_fraction", "energy_density", "frames_used", "meltpool_cells", "flagged_cells"];

pub fn map_csv(cells: &[ProcessMapCell]) -> String {
    csv_text(
        &MAP_CSV_HEADER,
        cells.iter().map(|c| {
            vec![
                fmt_f64(c.power_w),
                fmt_f64(c.scan_speed_m_s),
                fmt_f64(c.spatter_volume_um3),
                fmt_f64(c.flagged_fraction),
                fmt_f64(c.energy_density()),
                c.frames_used.to_string(),
                c.meltpool_cells.to_string(),
                c.flagged_cells.to_string(),
            ]
        }),
    )
}

fn curve_csv(x_name: &str, c: &TrendCurve) -> String {
    csv_text(
        &[x_name, "spatter_volume"],
        c.x.iter().zip(&c.spatter_volume_um3).map(|(x, v)| vec![fmt_f64(*x), fmt_f64(*v)]),
    )
}

/// Writes `map.csv`, `overlay.json`, `quadrants.json` (when the grid has
/// two or more distinct powers and speeds) and `trends/*.csv` under `dir`.
/// Returns the paths written, relative to `dir`.
pub fn emit_map(cells: &[ProcessMapCell], overlay: &BoundaryOverlay, dir: &Path) -> Result<Vec<String>> {
    if cells.is_empty() {
        return Err(Error::Empty("no process-map cells to emit".into()));
    }
    overlay.check()?;
    let mut written = BTreeSet::new();
    let mut put = |name: String, text: String| -> Result<()> {
        write_atomic(&dir.join(&name), text.as_bytes())?;
        written.insert(name);
        Ok(())
    };
    put("map.csv".into(), map_csv(cells))?;
    let trends = trend_curves(cells);
    for c in &trends.vs_power {
        put(format!("trends/power_at_speed_{}.csv", c.fixed_value.unwrap_or_default()), curve_csv("power", c))?;
    }
    for c in &trends.vs_speed {
        put(format!("trends/speed_at_power_{}.csv", c.fixed_value.unwrap_or_default()), curve_csv("velocity", c))?;
    }
    put("trends/energy_density.csv".into(), curve_csv("energy_density", &trends.vs_energy_density))?;
    write_json(&dir.join("overlay.json"), overlay)?;
    written.insert("overlay.json".into());
    if let Ok(q) = quadrant_means(cells) {
        write_json(&dir.join("quadrants.json"), &q)?;
        written.insert("quadrants.json".into());
    }
    Ok(written.into_iter().collect())
}
