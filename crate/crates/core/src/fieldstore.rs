//! Structured-grid field bundles and their on-disk format.
//!
//! A bundle directory holds `meta.json` plus one raw little-endian `f32`
//! array per field (`alpha_g.f32`, `T.f32`, `ux.f32`, ...). Cell `(i, j, k)`
//! lives at flat index `i + nx * (j + ny * k)`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::io_util;

/// Volume fractions within this distance outside `[0, 1]` are clamped on load.
pub const FRACTION_CLAMP_EPS: f64 = 1e-6;
/// Allowed deviation of `alpha_g + alpha_s + alpha_l` from one.
pub const FRACTION_SUM_TOL: f64 = 1e-3;

/// On-disk field names in canonical order.
pub const FIELD_NAMES: [&str; 9] = ["alpha_g", "alpha_s", "alpha_l", "T", "p", "rho", "ux", "uy", "uz"];

/// Process parameters a bundle was produced under.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub power_w: f64,
    pub velocity_m_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    /// Cell counts `[nx, ny, nz]`.
    pub dims: [usize; 3],
    /// Cell spacing in µm.
    pub spacing_um: [f64; 3],
    pub origin_um: [f64; 3],
    pub time_us: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<RunParams>,
    /// Keys found in `meta.json` that this crate does not interpret; kept so
    /// re-serialization is lossless.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing_um: [f64; 3], origin_um: [f64; 3], time_us: f64) -> Result<Self> {
        let meta = Self { dims, spacing_um, origin_um, time_us, params: None, extra: BTreeMap::new() };
        meta.check()?;
        Ok(meta)
    }

    pub fn check(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidParameter(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing_um.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidParameter(format!("grid spacing must be > 0, got {:?}", self.spacing_um)));
        }
        if self.origin_um.iter().chain([&self.time_us]).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid origin/time must be finite".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn cell_volume_um3(&self) -> f64 {
        self.spacing_um[0] * self.spacing_um[1] * self.spacing_um[2]
    }

    #[inline]
    pub fn flatten(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i < self.dims[0] && j < self.dims[1] && k < self.dims[2]
    }

    /// Cell-center position in µm.
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3<f64> {
        Vec3::new(
            self.origin_um[0] + (i as f64 + 0.5) * self.spacing_um[0],
            self.origin_um[1] + (j as f64 + 0.5) * self.spacing_um[1],
            self.origin_um[2] + (k as f64 + 0.5) * self.spacing_um[2],
        )
    }

    fn range_error(&self, i: usize, j: usize, k: usize) -> Error {
        Error::OutOfRange { i, j, k, nx: self.dims[0], ny: self.dims[1], nz: self.dims[2] }
    }
}

/// All field values at one cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub alpha_g: f32,
    pub alpha_s: f32,
    pub alpha_l: f32,
    /// K
    pub temperature: f32,
    /// Pa
    pub pressure: f32,
    /// kg/m³
    pub density: f32,
    /// m/s
    pub velocity: Vec3<f32>,
}

/// One timestep of per-cell fields on a uniform structured grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBundle {
    pub meta: GridMeta,
    pub alpha_g: Vec<f32>,
    pub alpha_s: Vec<f32>,
    pub alpha_l: Vec<f32>,
    pub temperature: Vec<f32>,
    pub pressure: Vec<f32>,
    pub density: Vec<f32>,
    /// Velocity components `[ux, uy, uz]`.
    pub velocity: [Vec<f32>; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonFinite,
    FractionOutOfRange,
    FractionSum,
    NonPositive,
    LengthMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    /// Flat cell index (for `LengthMismatch`, the offending length).
    pub index: usize,
    pub cell: Option<[usize; 3]>,
    pub kind: ViolationKind,
    pub value: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::FractionOutOfRange => "volume fraction outside [0, 1]",
            ViolationKind::FractionSum => "phase fractions do not sum to 1",
            ViolationKind::NonPositive => "value must be > 0",
            ViolationKind::LengthMismatch => "array length differs from cell count",
        };
        match self.cell {
            Some([i, j, k]) => {
                write!(f, "{}: {what} at cell {} ({i}, {j}, {k}), value {}", self.field, self.index, self.value)
            }
            None => write!(f, "{}: {what} (length {})", self.field, self.index),
        }
    }
}

impl FieldBundle {
    /// Bundle with every cell set to `cell`.
    pub fn filled(meta: GridMeta, cell: CellRecord) -> Self {
        let n = meta.n_cells();
        Self {
            meta,
            alpha_g: vec![cell.alpha_g; n],
            alpha_s: vec![cell.alpha_s; n],
            alpha_l: vec![cell.alpha_l; n],
            temperature: vec![cell.temperature; n],
            pressure: vec![cell.pressure; n],
            density: vec![cell.density; n],
            velocity: [vec![cell.velocity.x; n], vec![cell.velocity.y; n], vec![cell.velocity.z; n]],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.meta.n_cells()
    }

    pub fn field(&self, name: &str) -> Option<&[f32]> {
        Some(match name {
            "alpha_g" => &self.alpha_g,
            "alpha_s" => &self.alpha_s,
            "alpha_l" => &self.alpha_l,
            "T" => &self.temperature,
            "p" => &self.pressure,
            "rho" => &self.density,
            "ux" => &self.velocity[0],
            "uy" => &self.velocity[1],
            "uz" => &self.velocity[2],
            _ => return None,
        })
    }

    fn field_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        Some(match name {
            "alpha_g" => &mut self.alpha_g,
            "alpha_s" => &mut self.alpha_s,
            "alpha_l" => &mut self.alpha_l,
            "T" => &mut self.temperature,
            "p" => &mut self.pressure,
            "rho" => &mut self.density,
            "ux" => &mut self.velocity[0],
            "uy" => &mut self.velocity[1],
            "uz" => &mut self.velocity[2],
            _ => return None,
        })
    }

    /// Cell values at flat index `idx` (unchecked beyond slice bounds).
    #[inline]
    pub fn cell_flat(&self, idx: usize) -> CellRecord {
        CellRecord {
            alpha_g: self.alpha_g[idx],
            alpha_s: self.alpha_s[idx],
            alpha_l: self.alpha_l[idx],
            temperature: self.temperature[idx],
            pressure: self.pressure[idx],
            density: self.density[idx],
            velocity: Vec3::new(self.velocity[0][idx], self.velocity[1][idx], self.velocity[2][idx]),
        }
    }

    pub fn cell_at(&self, i: usize, j: usize, k: usize) -> Result<CellRecord> {
        if !self.meta.contains(i, j, k) {
            return Err(self.meta.range_error(i, j, k));
        }
        Ok(self.cell_flat(self.meta.flatten(i, j, k)))
    }

    pub fn set_cell_flat(&mut self, idx: usize, cell: CellRecord) {
        self.alpha_g[idx] = cell.alpha_g;
        self.alpha_s[idx] = cell.alpha_s;
        self.alpha_l[idx] = cell.alpha_l;
        self.temperature[idx] = cell.temperature;
        self.pressure[idx] = cell.pressure;
        self.density[idx] = cell.density;
        self.velocity[0][idx] = cell.velocity.x;
        self.velocity[1][idx] = cell.velocity.y;
        self.velocity[2][idx] = cell.velocity.z;
    }

    /// Snaps volume fractions lying within [`FRACTION_CLAMP_EPS`] outside
    /// `[0, 1]` onto the interval. Returns the number of values changed.
    pub fn clamp_fractions(&mut self) -> usize {
        let mut changed = 0;
        for field in [&mut self.alpha_g, &mut self.alpha_s, &mut self.alpha_l] {
            for v in field.iter_mut() {
                let x = f64::from(*v);
                if (-FRACTION_CLAMP_EPS..0.0).contains(&x) {
                    *v = 0.0;
                    changed += 1;
                } else if x > 1.0 && x <= 1.0 + FRACTION_CLAMP_EPS {
                    *v = 1.0;
                    changed += 1;
                }
            }
        }
        changed
    }
}

/// Checks every bundle invariant. Violations are returned as data in
/// field-then-cell order; an empty list means the bundle is valid.
pub fn validate(bundle: &FieldBundle) -> Vec<Violation> {
    let meta = &bundle.meta;
    let n = meta.n_cells();
    let mut out = Vec::new();
    let mut lengths_ok = true;
    for name in FIELD_NAMES {
        let data = bundle.field(name).expect("canonical field");
        if data.len() != n {
            lengths_ok = false;
            out.push(Violation {
                field: name.to_string(),
                index: data.len(),
                cell: None,
                kind: ViolationKind::LengthMismatch,
                value: data.len() as f64,
            });
        }
    }
    if !lengths_ok {
        return out;
    }
    let at = |field: &str, idx: usize, kind: ViolationKind, value: f64| Violation {
        field: field.to_string(),
        index: idx,
        cell: Some(meta.unflatten(idx)),
        kind,
        value,
    };
    for name in FIELD_NAMES {
        let data = bundle.field(name).expect("canonical field");
        let is_fraction = name.starts_with("alpha_");
        let positive = name == "T" || name == "rho";
        for (idx, &v) in data.iter().enumerate() {
            let x = f64::from(v);
            if !x.is_finite() {
                out.push(at(name, idx, ViolationKind::NonFinite, x));
            } else if is_fraction && !(-FRACTION_CLAMP_EPS..=1.0 + FRACTION_CLAMP_EPS).contains(&x) {
                out.push(at(name, idx, ViolationKind::FractionOutOfRange, x));
            } else if positive && x <= 0.0 {
                out.push(at(name, idx, ViolationKind::NonPositive, x));
            }
        }
    }
    for idx in 0..n {
        let s = f64::from(bundle.alpha_g[idx]) + f64::from(bundle.alpha_s[idx]) + f64::from(bundle.alpha_l[idx]);
        if s.is_finite() && (s - 1.0).abs() > FRACTION_SUM_TOL {
            out.push(at("alpha_sum", idx, ViolationKind::FractionSum, s));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    #[serde(flatten)]
    meta: GridMeta,
    fields: Vec<String>,
}

/// Loads and validates a bundle directory.
pub fn load_bundle(path: &Path) -> Result<FieldBundle> {
    let meta_path = path.join("meta.json");
    let file: MetaFile = io_util::read_json(&meta_path)?;
    let meta = file.meta;
    meta.check()?;
    let n = meta.n_cells();
    let declared: HashSet<&str> = file.fields.iter().map(String::as_str).collect();
    let mut bundle = FieldBundle {
        meta: meta.clone(),
        alpha_g: Vec::new(),
        alpha_s: Vec::new(),
        alpha_l: Vec::new(),
        temperature: Vec::new(),
        pressure: Vec::new(),
        density: Vec::new(),
        velocity: [Vec::new(), Vec::new(), Vec::new()],
    };
    for name in FIELD_NAMES {
        if !declared.contains(name) {
            return Err(Error::Field { field: name.into(), reason: "not declared in meta.json fields".into() });
        }
        let fpath = path.join(format!("{name}.f32"));
        let bytes = fs::read(&fpath).map_err(|e| Error::Field {
            field: name.into(),
            reason: format!("cannot read {}: {e}", fpath.display()),
        })?;
        if bytes.len() != 4 * n {
            return Err(Error::Field {
                field: name.into(),
                reason: format!("expected {} bytes for {n} cells, found {}", 4 * n, bytes.len()),
            });
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Field {
                field: name.into(),
                reason: format!("non-finite value at cell {idx} {:?}", meta.unflatten(idx)),
            });
        }
        *bundle.field_mut(name).expect("canonical field") = values;
    }
    finish_load(bundle)
}

fn finish_load(mut bundle: FieldBundle) -> Result<FieldBundle> {
    let clamped = bundle.clamp_fractions();
    if clamped > 0 {
        log::warn!("clamped {clamped} volume-fraction value(s) onto [0, 1]");
    }
    let violations = validate(&bundle);
    if violations.is_empty() {
        Ok(bundle)
    } else {
        Err(Error::Validation(violations))
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `bundle` into directory `path`, creating it if needed.
pub fn save_bundle(bundle: &FieldBundle, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let file = MetaFile { meta: bundle.meta.clone(), fields: FIELD_NAMES.iter().map(|s| s.to_string()).collect() };
    io_util::write_json(&path.join("meta.json"), &file)?;
    for name in FIELD_NAMES {
        let data = bundle.field(name).expect("canonical field");
        io_util::write_atomic(&path.join(format!("{name}.f32")), &f32_bytes(data))?;
    }
    Ok(())
}

/// Column order accepted by [`import_points_csv`].
pub const POINT_CSV_COLUMNS: [&str; 12] =
    ["x_um", "y_um", "z_um", "alpha_g", "alpha_s", "alpha_l", "T_K", "p_Pa", "rho", "ux", "uy", "uz"];

/// Rasterizes a point-cloud CSV onto a declared grid. Each point lands in
/// the cell containing it; every cell must receive exactly one point.
pub fn import_points_csv(path: &Path, meta: GridMeta) -> Result<FieldBundle> {
    meta.check()?;
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv { path: display.clone(), line: 0, reason: e.to_string() })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv { path: display.clone(), line: 1, reason: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != POINT_CSV_COLUMNS {
        return Err(Error::Csv {
            path: display,
            line: 1,
            reason: format!("expected columns {POINT_CSV_COLUMNS:?}, found {header:?}"),
        });
    }
    let n = meta.n_cells();
    let blank = CellRecord {
        alpha_g: 0.0,
        alpha_s: 0.0,
        alpha_l: 0.0,
        temperature: 0.0,
        pressure: 0.0,
        density: 0.0,
        velocity: Vec3::new(0.0, 0.0, 0.0),
    };
    let mut bundle = FieldBundle::filled(meta.clone(), blank);
    let mut seen = vec![false; n];
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no as u64 + 2;
        let record = record.map_err(|e| Error::Csv { path: display.clone(), line, reason: e.to_string() })?;
        let mut vals = [0f64; 12];
        for (c, v) in vals.iter_mut().enumerate() {
            let cell = record.get(c).ok_or_else(|| Error::Csv {
                path: display.clone(),
                line,
                reason: format!("missing column {}", POINT_CSV_COLUMNS[c]),
            })?;
            *v = cell.parse().map_err(|_| Error::Csv {
                path: display.clone(),
                line,
                reason: format!("cannot parse {} value `{cell}`", POINT_CSV_COLUMNS[c]),
            })?;
        }
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let f = ((vals[a] - meta.origin_um[a]) / meta.spacing_um[a]).floor();
            if !(f >= 0.0 && (f as usize) < meta.dims[a]) {
                return Err(Error::Csv {
                    path: display.clone(),
                    line,
                    reason: format!("point ({}, {}, {}) outside grid", vals[0], vals[1], vals[2]),
                });
            }
            ijk[a] = f as usize;
        }
        let idx = meta.flatten(ijk[0], ijk[1], ijk[2]);
        if std::mem::replace(&mut seen[idx], true) {
            return Err(Error::Csv { path: display.clone(), line, reason: format!("second point for cell {ijk:?}") });
        }
        bundle.set_cell_flat(
            idx,
            CellRecord {
                alpha_g: vals[3] as f32,
                alpha_s: vals[4] as f32,
                alpha_l: vals[5] as f32,
                temperature: vals[6] as f32,
                pressure: vals[7] as f32,
                density: vals[8] as f32,
                velocity: Vec3::new(vals[9] as f32, vals[10] as f32, vals[11] as f32),
            },
        );
    }
    if let Some(idx) = seen.iter().position(|s| !s) {
        return Err(Error::Csv {
            path: display,
            line: 0,
            reason: format!("no point for cell {:?}", meta.unflatten(idx)),
        });
    }
    finish_load(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn liquid() -> CellRecord {
        CellRecord {
            alpha_g: 0.0,
            alpha_s: 0.0,
            alpha_l: 1.0,
            temperature: 2000.0,
            pressure: 101325.0,
            density: 6500.0,
            velocity: Vec3::new(1.0, 0.0, -0.5),
        }
    }

    fn meta(dims: [usize; 3]) -> GridMeta {
        GridMeta::new(dims, [2.5, 5.0, 2.5], [0.0, -100.0, 0.0], 10.0).unwrap()
    }

    #[test]
    fn flat_index_x_fastest() {
        let m = meta([2, 1, 1]);
        let mut b = FieldBundle::filled(m, liquid());
        b.temperature = vec![1000.0, 2000.0];
        assert_eq!(b.cell_at(1, 0, 0).unwrap().temperature, 2000.0);
        let m = meta([3, 4, 5]);
        assert_eq!(m.flatten(2, 3, 4), 59);
        assert_eq!(m.unflatten(59), [2, 3, 4]);
    }

    #[test]
    fn corner_is_last_element_and_out_of_range_errors() {
        let m = meta([3, 4, 5]);
        let mut b = FieldBundle::filled(m, liquid());
        *b.pressure.last_mut().unwrap() = 7.0;
        assert_eq!(b.cell_at(2, 3, 4).unwrap().pressure, 7.0);
        assert_eq!(b.cell_at(0, 0, 0).unwrap(), liquid());
        assert!(matches!(b.cell_at(3, 0, 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn validate_reports_each_invariant() {
        let m = meta([2, 2, 1]);
        let b = FieldBundle::filled(m.clone(), liquid());
        assert!(validate(&b).is_empty());

        let mut t0 = b.clone();
        t0.temperature[3] = 0.0;
        let v = validate(&t0);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].field.as_str(), v[0].index, v[0].kind), ("T", 3, ViolationKind::NonPositive));

        let mut half = b.clone();
        half.alpha_l[2] = 0.5;
        let v = validate(&half);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].kind, v[0].cell), (ViolationKind::FractionSum, Some([0, 1, 0])));
    }

    #[test]
    fn fraction_boundary_cases() {
        let m = meta([1, 1, 1]);
        let gas = CellRecord { alpha_g: 1.0, alpha_l: 0.0, ..liquid() };
        // value, clamped result (None = violation)
        let cases: [(f32, Option<f32>); 5] = [
            (1.2, None),
            (1.0 + 5e-7, Some(1.0)),
            (1.0, Some(1.0)),
            (-5e-7, Some(0.0)),
            (-1e-3, None),
        ];
        for (raw, expect) in cases {
            let mut b = FieldBundle::filled(m.clone(), gas);
            b.alpha_g[0] = raw;
            if raw < 0.0 {
                b.alpha_s[0] = 1.0;
            }
            let violations = validate(&b);
            let range_violation = violations.iter().any(|v| v.kind == ViolationKind::FractionOutOfRange);
            assert_eq!(range_violation, expect.is_none(), "raw {raw}");
            if let Some(clamped) = expect {
                b.clamp_fractions();
                assert_eq!(b.alpha_g[0], clamped);
            }
        }
    }

    #[test]
    fn validation_is_pure() {
        let mut b = FieldBundle::filled(meta([3, 2, 2]), liquid());
        b.density[5] = -1.0;
        b.alpha_g[1] = 2.0;
        assert_eq!(validate(&b), validate(&b));
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = meta([3, 2, 2]);
        m.params = Some(RunParams { power_w: 300.0, velocity_m_s: 1.0 });
        let mut b = FieldBundle::filled(m, liquid());
        for (i, t) in b.temperature.iter_mut().enumerate() {
            *t = 1700.0 + i as f32 * 0.1;
        }
        let p = dir.path().join("frame");
        save_bundle(&b, &p).unwrap();
        let back = load_bundle(&p).unwrap();
        assert_eq!(back, b);
        let bytes1 = fs::read(p.join("T.f32")).unwrap();
        save_bundle(&back, &p).unwrap();
        assert_eq!(fs::read(p.join("T.f32")).unwrap(), bytes1);
    }

    #[test]
    fn meta_preserves_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        save_bundle(&FieldBundle::filled(meta([1, 1, 1]), liquid()), &p).unwrap();
        let mut raw: serde_json::Value = serde_json::from_slice(&fs::read(p.join("meta.json")).unwrap()).unwrap();
        raw["solver"] = serde_json::json!({"name": "vof", "iter": 3});
        fs::write(p.join("meta.json"), serde_json::to_vec(&raw).unwrap()).unwrap();
        let b = load_bundle(&p).unwrap();
        save_bundle(&b, &p).unwrap();
        let again: serde_json::Value = serde_json::from_slice(&fs::read(p.join("meta.json")).unwrap()).unwrap();
        assert_eq!(again, raw);
    }

    #[test]
    fn load_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        save_bundle(&FieldBundle::filled(meta([2, 1, 1]), liquid()), &p).unwrap();

        fs::write(p.join("rho.f32"), [0u8; 4]).unwrap();
        match load_bundle(&p) {
            Err(Error::Field { field, .. }) => assert_eq!(field, "rho"),
            other => panic!("{other:?}"),
        }
        fs::write(p.join("rho.f32"), f32_bytes(&[1.0, f32::NAN])).unwrap();
        match load_bundle(&p) {
            Err(Error::Field { field, reason }) => assert_eq!((field.as_str(), reason.contains("cell 1")), ("rho", true)),
            other => panic!("{other:?}"),
        }
        fs::remove_file(p.join("rho.f32")).unwrap();
        assert!(matches!(load_bundle(&p), Err(Error::Field { field, .. }) if field == "rho"));
    }

    #[test]
    fn load_rejects_bad_alpha_sum_with_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b");
        let mut b = FieldBundle::filled(meta([2, 2, 1]), liquid());
        b.alpha_l[3] = 0.5;
        save_bundle(&b, &p).unwrap();
        match load_bundle(&p) {
            Err(Error::Validation(v)) => assert_eq!(v[0].cell, Some([1, 1, 0])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn point_csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let m = GridMeta::new([2, 1, 1], [10.0, 10.0, 10.0], [0.0, 0.0, 0.0], 0.0).unwrap();
        let p = dir.path().join("pts.csv");
        let mut text = POINT_CSV_COLUMNS.join(",") + "\n";
        text += "15,5,5,0,0,1,2100,101325,6400,1,2,3\n";
        text += "5,5,5,1,0,0,300,101325,1.2,0,0,0\n";
        fs::write(&p, &text).unwrap();
        let b = import_points_csv(&p, m.clone()).unwrap();
        assert_eq!(b.cell_at(1, 0, 0).unwrap().temperature, 2100.0);
        assert_eq!(b.cell_at(0, 0, 0).unwrap().alpha_g, 1.0);

        fs::write(&p, POINT_CSV_COLUMNS.join(",") + "\n5,5,5,1,0,0,300,101325,1.2,0,0,0\n").unwrap();
        assert!(matches!(import_points_csv(&p, m.clone()), Err(Error::Csv { .. })));
        fs::write(&p, POINT_CSV_COLUMNS.join(",") + "\n5,5,5,1,0,0,300,x,1.2,0,0,0\n").unwrap();
        assert!(matches!(import_points_csv(&p, m), Err(Error::Csv { line: 2, .. })));
    }
}

#[cfg(test)]
pub(crate) use tests::liquid as test_liquid_cell;
