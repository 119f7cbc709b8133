//! Calibrated surrogate melt-pool fields and synthetic labeled datasets.
//!
//! The surrogate is not a flow solver. It paints an ellipsoidal melt pool
//! that travels with the beam, with temperature, recoil pressure, density
//! and a backward surface flow derived from closed-form expressions, and
//! injects ballistic spatter droplets whose identities are kept in a
//! ground-truth ledger. Melt-pool width and depth at 1 m/s interpolate a
//! calibration table (SS316L defaults).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, RunProvenance, SampleRecord};
use crate::error::{Error, Result};
use crate::fieldstore::{CellRecord, FieldBundle, GridMeta, RunParams};
use crate::geom::Vec3;
use crate::learners::member_rng;
use crate::num::Real;

/// Gravity in µm/µs² (9.81 m/s²), acting along −z.
const GRAVITY_UM_US2: f64 = 9.81e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessParams {
    pub power_w: f64,
    pub scan_speed_m_s: f64,
    #[serde(default = "default_beam_radius")]
    pub beam_radius_um: f64,
    #[serde(default = "default_absorptivity")]
    pub absorptivity: f64,
}

fn default_beam_radius() -> f64 {
    50.0
}

fn default_absorptivity() -> f64 {
    0.55
}

impl ProcessParams {
    pub fn new(power_w: f64, scan_speed_m_s: f64) -> Self {
        Self { power_w, scan_speed_m_s, beam_radius_um: default_beam_radius(), absorptivity: default_absorptivity() }
    }

    pub fn check(&self) -> Result<()> {
        let positive = [self.power_w, self.scan_speed_m_s, self.beam_radius_um].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || !(self.absorptivity > 0.0 && self.absorptivity <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "process parameters need positive power, speed and radius and absorptivity in (0, 1]: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPoint {
    pub power_w: f64,
    pub width_um: f64,
    pub depth_um: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialParams {
    pub t_liquidus_k: f64,
    pub t_solidus_k: f64,
    pub t_vapor_k: f64,
    pub t_ambient_k: f64,
    pub p0_pa: f64,
    /// J/kg
    pub latent_heat_vap: f64,
    /// kg/mol
    pub molar_mass: f64,
    /// J/mol/K
    pub gas_constant: f64,
    /// `(T [K], rho [kg/m³])` anchors; density is linear between them and
    /// held constant outside.
    pub rho_metal: [[f64; 2]; 2],
    pub rho_gas: f64,
    /// Melt-pool width and depth at 1 m/s, ascending in power.
    pub calibration: Vec<CalibrationPoint>,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self::ss316l()
    }
}

impl MaterialParams {
    pub fn ss316l() -> Self {
        Self {
            t_liquidus_k: 1723.0,
            t_solidus_k: 1658.0,
            t_vapor_k: 3090.0,
            t_ambient_k: 300.0,
            p0_pa: 101_325.0,
            latent_heat_vap: 7.45e6,
            molar_mass: 0.055_93,
            gas_constant: 8.314_462_618,
            rho_metal: [[298.0, 7618.0], [1923.0, 6468.0]],
            rho_gas: 1.138,
            calibration: vec![
                CalibrationPoint { power_w: 150.0, width_um: 100.0, depth_um: 38.0 },
                CalibrationPoint { power_w: 300.0, width_um: 140.0, depth_um: 73.0 },
                CalibrationPoint { power_w: 450.0, width_um: 176.0, depth_um: 152.0 },
            ],
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.t_solidus_k < self.t_liquidus_k && self.t_liquidus_k < self.t_vapor_k && self.t_ambient_k > 0.0) {
            return Err(Error::InvalidParameter("material needs 0 < T_ambient and T_solidus < T_liquidus < T_vapor".into()));
        }
        let positive = [self.p0_pa, self.latent_heat_vap, self.molar_mass, self.gas_constant, self.rho_gas];
        if positive.iter().any(|v| !(*v > 0.0)) || self.rho_metal.iter().any(|a| !(a[1] > 0.0)) {
            return Err(Error::InvalidParameter("material constants must be positive".into()));
        }
        if self.rho_metal[0][0] >= self.rho_metal[1][0] {
            return Err(Error::InvalidParameter("density anchors must be ascending in temperature".into()));
        }
        let cal = &self.calibration;
        if cal.len() < 2 {
            return Err(Error::InvalidParameter("calibration table needs at least two powers".into()));
        }
        if cal.iter().any(|c| !(c.width_um > 0.0 && c.depth_um > 0.0)) {
            return Err(Error::InvalidParameter("calibration widths and depths must be positive".into()));
        }
        let monotone = cal.windows(2).all(|w| {
            w[0].power_w < w[1].power_w && w[0].width_um <= w[1].width_um && w[0].depth_um <= w[1].depth_um
        });
        if !monotone {
            return Err(Error::InvalidParameter("calibration must be ascending in power with monotone width and depth".into()));
        }
        Ok(())
    }

    pub fn density(&self, t: f64) -> f64 {
        let [[t0, r0], [t1, r1]] = self.rho_metal;
        let f = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        r0 + f * (r1 - r0)
    }

    /// Width and depth at 1 m/s, piecewise linear in power and extrapolated
    /// along the end segments.
    pub fn calibrated_dims(&self, power_w: f64) -> (f64, f64) {
        let cal = &self.calibration;
        let seg = cal.windows(2).position(|w| power_w <= w[1].power_w).unwrap_or(cal.len() - 2);
        let (a, b) = (cal[seg], cal[seg + 1]);
        let f = (power_w - a.power_w) / (b.power_w - a.power_w);
        (a.width_um + f * (b.width_um - a.width_um), a.depth_um + f * (b.depth_um - a.depth_um))
    }
}

/// Gaussian beam intensity in W/m² at lateral offset `offset_um` from the
/// beam axis.
pub fn beam_intensity<T: Real>(offset_um: T, params: &ProcessParams) -> T {
    let two = T::lit(2.0);
    let r = T::lit(params.beam_radius_um * 1e-6);
    let d = offset_um * T::lit(1e-6);
    two * T::lit(params.absorptivity) * T::lit(params.power_w) / (T::PI() * r * r) * (-two * d * d / (r * r)).exp()
}

/// Recoil pressure magnitude in Pa at surface temperature `t`.
pub fn recoil_pressure<T: Real>(t: T, mat: &MaterialParams) -> T {
    let tv = T::lit(mat.t_vapor_k);
    let expo = T::lit(mat.latent_heat_vap) * T::lit(mat.molar_mass) * (t - tv) / (T::lit(mat.gas_constant) * t * tv);
    T::lit(0.54) * T::lit(mat.p0_pa) * expo.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Explicit grid dims; `None` sizes the domain to the melt pool.
    pub dims: Option<[usize; 3]>,
    /// Isotropic cell size, µm.
    pub spacing_um: f64,
    /// Cells of metal below the initial surface; `None` sizes to the pool.
    pub substrate_cells: Option<usize>,
    /// Gas height above the surface when sizing automatically, µm.
    pub gas_um: f64,
    pub frames: usize,
    pub dt_us: f64,
    /// Expected ejections per frame when the mean surface recoil pressure
    /// equals the ambient pressure.
    pub spatter_rate: f64,
    pub ejection_speed_m_s: [f64; 2],
    pub spatter_radius_cells: f64,
    /// Ejections that would come closer than this to an existing droplet in
    /// any frame are redrawn; 0 disables the check.
    pub min_spacing_um: f64,
    pub temperature_noise_k: f64,
    pub velocity_noise_m_s: f64,
    pub peak_temperature_cap_k: f64,
    /// Absorbed power scale of the peak-temperature saturation, W.
    pub heating_power_w: f64,
    /// Exponent of the `1/v` factor in peak heating.
    pub heating_speed_exponent: f64,
    /// Width of the liquid-fraction ramp in normalized pool radius.
    pub liquid_ramp: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            dims: None,
            spacing_um: 5.0,
            substrate_cells: None,
            gas_um: 60.0,
            frames: 10,
            dt_us: 2.0,
            spatter_rate: 0.5,
            ejection_speed_m_s: [2.5, 20.0],
            spatter_radius_cells: 1.6,
            min_spacing_um: 0.0,
            temperature_noise_k: 15.0,
            velocity_noise_m_s: 0.05,
            peak_temperature_cap_k: 3600.0,
            heating_power_w: 90.0,
            heating_speed_exponent: 0.25,
            liquid_ramp: 0.15,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn check(&self) -> Result<()> {
        let [lo, hi] = self.ejection_speed_m_s;
        let bad = if self.frames == 0 {
            Some("frames must be >= 1")
        } else if !(self.spacing_um > 0.0 && self.dt_us > 0.0) {
            Some("spacing_um and dt_us must be > 0")
        } else if !(self.spatter_rate >= 0.0 && self.spatter_rate.is_finite()) {
            Some("spatter_rate must be finite and >= 0")
        } else if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            Some("ejection_speed_m_s must be [min, max] with 0 < min <= max")
        } else if !(self.spatter_radius_cells >= 1.0) {
            Some("spatter_radius_cells must be >= 1")
        } else if !(self.liquid_ramp > 0.0 && self.liquid_ramp < 1.0) {
            Some("liquid_ramp must lie in (0, 1)")
        } else if !(self.heating_power_w > 0.0 && self.temperature_noise_k >= 0.0 && self.velocity_noise_m_s >= 0.0) {
            Some("heating_power_w must be > 0 and noise levels >= 0")
        } else if !(self.min_spacing_um >= 0.0 && self.gas_um >= 0.0) {
            Some("min_spacing_um and gas_um must be >= 0")
        } else {
            None
        };
        match bad {
            Some(msg) => Err(Error::InvalidParameter(msg.into())),
            None => Ok(()),
        }
    }
}

/// Analytic melt-pool shape for one process point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub width_um: f64,
    pub depth_um: f64,
    /// Semi-axis ahead of the beam center, µm.
    pub front_um: f64,
    /// Semi-axis behind the beam center, µm.
    pub rear_um: f64,
    pub peak_temperature_k: f64,
}

pub fn pool_geometry(params: &ProcessParams, mat: &MaterialParams, cfg: &SurrogateConfig) -> Result<PoolGeometry> {
    params.check()?;
    let (w1, d1) = mat.calibrated_dims(params.power_w);
    let scale = (1.0 / params.scan_speed_m_s).sqrt();
    let (width_um, depth_um) = (w1 * scale, d1 * scale);
    if !(width_um > 0.0 && depth_um > 0.0) {
        return Err(Error::InvalidParameter(format!("calibration gives a non-positive melt pool at {} W", params.power_w)));
    }
    let drive = params.absorptivity * params.power_w * (1.0 / params.scan_speed_m_s).powf(cfg.heating_speed_exponent);
    let rise = (cfg.peak_temperature_cap_k - mat.t_liquidus_k).max(0.0) * (1.0 - (-drive / cfg.heating_power_w).exp());
    Ok(PoolGeometry {
        width_um,
        depth_um,
        front_um: width_um / 2.0,
        rear_um: width_um / 2.0 * (1.0 + params.scan_speed_m_s),
        peak_temperature_k: mat.t_liquidus_k + rise,
    })
}

/// Temperature shape inside the pool: 1 at the beam center, 0 on the pool
/// boundary.
fn heat_profile(s: f64) -> f64 {
    let floor = (-2.0f64).exp();
    ((-2.0 * s * s).exp() - floor) / (1.0 - floor)
}

fn pool_temperature(s: f64, geom: &PoolGeometry, mat: &MaterialParams) -> f64 {
    if s <= 1.0 {
        mat.t_liquidus_k + (geom.peak_temperature_k - mat.t_liquidus_k) * heat_profile(s)
    } else {
        mat.t_ambient_k + (mat.t_liquidus_k - mat.t_ambient_k) * (-3.0 * (s - 1.0)).exp()
    }
}

/// Expected ejections per frame: rate times the area-mean surface recoil
/// pressure over the pool, relative to ambient.
pub fn spatter_lambda(geom: &PoolGeometry, mat: &MaterialParams, cfg: &SurrogateConfig) -> f64 {
    const N: usize = 400;
    let mean: f64 = (0..N)
        .map(|q| {
            let s = (q as f64 + 0.5) / N as f64;
            recoil_pressure(pool_temperature(s, geom, mat), mat) * 2.0 * s / N as f64
        })
        .sum();
    cfg.spatter_rate * mean / mat.p0_pa
}

/// Where the domain sits relative to the beam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub meta: GridMeta,
    /// Beam x at frame 0, µm (a cell center).
    pub beam_x0_um: f64,
    /// Track center line y, µm (a cell center).
    pub track_y_um: f64,
    /// Initial metal surface height, µm (a cell face).
    pub surface_z_um: f64,
}

fn layout(params: &ProcessParams, geom: &PoolGeometry, cfg: &SurrogateConfig) -> Result<Layout> {
    let h = cfg.spacing_um;
    let cells = |len: f64| (len / h).ceil() as usize;
    let travel = params.scan_speed_m_s * cfg.dt_us * (cfg.frames - 1) as f64;
    let i0 = cells(geom.rear_um + 3.0 * h);
    let half_y = cells(geom.width_um / 2.0 + 3.0 * h);
    let k_s = cfg.substrate_cells.unwrap_or_else(|| cells(geom.depth_um + 3.0 * h));
    let dims = cfg.dims.unwrap_or([
        i0 + cells(geom.front_um + travel + 3.0 * h) + 1,
        2 * half_y + 1,
        k_s + cells(cfg.gas_um).max(1),
    ]);
    let meta = GridMeta::new(dims, [h; 3], [0.0; 3], 0.0)?;
    let lay = Layout {
        beam_x0_um: (i0 as f64 + 0.5) * h,
        track_y_um: ((dims[1] / 2) as f64 + 0.5) * h,
        surface_z_um: k_s as f64 * h,
        meta,
    };
    let [lx, ly, lz] = [dims[0] as f64 * h, dims[1] as f64 * h, dims[2] as f64 * h];
    let fits = lay.beam_x0_um - geom.rear_um >= h
        && lay.beam_x0_um + travel + geom.front_um <= lx - h
        && lay.track_y_um - geom.width_um / 2.0 >= h
        && lay.track_y_um + geom.width_um / 2.0 <= ly - h
        && lay.surface_z_um - geom.depth_um >= h
        && lay.surface_z_um < lz;
    if !fits {
        return Err(Error::InvalidParameter(format!(
            "domain {dims:?} at {h} µm is too small for a {:.1} x {:.1} x {:.1} µm melt pool travelling {travel:.1} µm",
            geom.rear_um + geom.front_um,
            geom.width_um,
            geom.depth_um
        )));
    }
    Ok(lay)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub frame: usize,
    pub center_um: [f64; 3],
    pub n_cells: usize,
}

/// One injected droplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatterTruth {
    pub id: u64,
    pub birth_frame: usize,
    pub birth_time_us: f64,
    pub velocity_m_s: [f64; 3],
    pub temperature_k: f64,
    pub initial_cells: Vec<[u32; 3]>,
    /// Frames in which the droplet has at least one cell in the domain.
    pub frames: Vec<TruthFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: ProcessParams,
    pub seed: u64,
    pub frames: usize,
    pub dt_us: f64,
    pub lambda_per_frame: f64,
    pub geometry: PoolGeometry,
    /// Ejections redrawn because of the spacing rule.
    pub redrawn: usize,
    pub spatter: Vec<SpatterTruth>,
}

#[derive(Clone, Debug)]
pub struct SurrogateRun {
    pub frames: Vec<FieldBundle>,
    pub truth: GroundTruth,
    pub layout: Layout,
}

struct Droplet {
    birth_frame: usize,
    origin: Vec3<f64>,
    velocity: Vec3<f64>,
    temperature: f64,
    pressure: f64,
}

impl Droplet {
    fn center(&self, age_us: f64) -> Vec3<f64> {
        self.origin + self.velocity * age_us - Vec3::new(0.0, 0.0, 0.5 * GRAVITY_UM_US2 * age_us * age_us)
    }
}

/// Cells whose centers lie within `radius` of `center`.
fn ball_cells(meta: &GridMeta, center: Vec3<f64>, radius: f64) -> Vec<usize> {
    let h = meta.spacing_um;
    let c = [center.x, center.y, center.z];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let l = ((c[a] - radius - meta.origin_um[a]) / h[a] - 0.5).ceil();
        let u = ((c[a] + radius - meta.origin_um[a]) / h[a] - 0.5).floor();
        if u < 0.0 || l > (meta.dims[a] - 1) as f64 || l > u {
            return Vec::new();
        }
        lo[a] = l.max(0.0) as usize;
        hi[a] = u.min((meta.dims[a] - 1) as f64) as usize;
    }
    let mut out = Vec::new();
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                if (meta.cell_center(i, j, k) - center).norm() <= radius {
                    out.push(meta.flatten(i, j, k));
                }
            }
        }
    }
    out
}

fn draw_droplets(
    params: &ProcessParams,
    mat: &MaterialParams,
    cfg: &SurrogateConfig,
    geom: &PoolGeometry,
    lay: &Layout,
    lambda: f64,
) -> Result<(Vec<Droplet>, usize)> {
    let mut rng = member_rng(cfg.seed, 0);
    let mut droplets: Vec<Droplet> = Vec::new();
    let mut redrawn = 0;
    if lambda <= 0.0 {
        return Ok((droplets, 0));
    }
    let poisson = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(format!("spatter rate: {e}")))?;
    let h = cfg.spacing_um;
    let radius = cfg.spatter_radius_cells * h;
    let [s_lo, s_hi] = cfg.ejection_speed_m_s;
    let t_rim = pool_temperature(0.5, geom, mat);
    for f in 0..cfg.frames {
        let n = poisson.sample(&mut rng) as usize;
        let beam_x = lay.beam_x0_um + params.scan_speed_m_s * cfg.dt_us * f as f64;
        for _ in 0..n {
            // redraw a bounded number of times to honor the spacing rule
            for _attempt in 0..20 {
                let theta = rng.random_range(std::f64::consts::FRAC_PI_2..1.5 * std::f64::consts::PI);
                let speed = if s_hi > s_lo { rng.random_range(s_lo..=s_hi) } else { s_lo };
                let elevation = rng.random_range(30f64.to_radians()..80f64.to_radians());
                let azimuth = std::f64::consts::PI + rng.random_range(-45f64.to_radians()..45f64.to_radians());
                let t_noise: f64 = rng.sample(StandardNormal);
                let origin = Vec3::new(
                    beam_x + geom.rear_um * theta.cos(),
                    lay.track_y_um + geom.width_um / 2.0 * theta.sin(),
                    lay.surface_z_um + radius + 1.5 * h,
                );
                let temperature = t_rim + 40.0 * t_noise;
                let d = Droplet {
                    birth_frame: f,
                    origin,
                    velocity: Vec3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin())
                        * speed,
                    temperature,
                    pressure: mat.p0_pa + recoil_pressure(temperature, mat),
                };
                let clash = cfg.min_spacing_um > 0.0
                    && droplets.iter().any(|o| {
                        (f..cfg.frames).any(|g| {
                            let (a, b) = ((g - f) as f64 * cfg.dt_us, (g - o.birth_frame) as f64 * cfg.dt_us);
                            (d.center(a) - o.center(b)).norm() < cfg.min_spacing_um
                        })
                    });
                if clash {
                    redrawn += 1;
                    continue;
                }
                droplets.push(d);
                break;
            }
        }
    }
    Ok((droplets, redrawn))
}

fn render_frame(
    f: usize,
    params: &ProcessParams,
    mat: &MaterialParams,
    cfg: &SurrogateConfig,
    geom: &PoolGeometry,
    lay: &Layout,
    droplets: &[Droplet],
) -> FieldBundle {
    let time = cfg.dt_us * f as f64;
    let mut meta = lay.meta.clone();
    meta.time_us = time;
    meta.params = Some(RunParams { power_w: params.power_w, velocity_m_s: params.scan_speed_m_s });
    let gas = CellRecord {
        alpha_g: 1.0,
        alpha_s: 0.0,
        alpha_l: 0.0,
        temperature: mat.t_ambient_k as f32,
        pressure: mat.p0_pa as f32,
        density: mat.rho_gas as f32,
        velocity: Vec3::new(0.0, 0.0, 0.0),
    };
    let mut bundle = FieldBundle::filled(meta.clone(), gas);
    let mut rng = member_rng(cfg.seed, 1 + f as u64);
    let t_noise = Normal::new(0.0, cfg.temperature_noise_k).expect("checked noise");
    let u_noise = Normal::new(0.0, cfg.velocity_noise_m_s).expect("checked noise");
    let beam_x = lay.beam_x0_um + params.scan_speed_m_s * time;
    let b = geom.width_um / 2.0;
    let [nx, ny, nz] = meta.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = meta.cell_center(i, j, k);
                if c.z > lay.surface_z_um {
                    continue;
                }
                let dx = c.x - beam_x;
                let dy = c.y - lay.track_y_um;
                let dz = lay.surface_z_um - c.z;
                let a = if dx >= 0.0 { geom.front_um } else { geom.rear_um };
                let s = ((dx / a).powi(2) + (dy / b).powi(2) + (dz / geom.depth_um).powi(2)).sqrt();
                let alpha_l = (0.5 + (1.0 - s) / (2.0 * cfg.liquid_ramp)).clamp(0.0, 1.0);
                let mut t = pool_temperature(s, geom, mat);
                let mut u = Vec3::new(0.0, 0.0, 0.0);
                if s < 1.0 {
                    t += t_noise.sample(&mut rng);
                    let us = (2.0 * recoil_pressure(t, mat) / mat.density(t)).sqrt();
                    let w = us * (-2.0 * dz / geom.depth_um).exp();
                    // backward flow strongest on the rear wall, none at the front edge
                    let vx = -0.5 * w * (1.0 - (dx / a).clamp(-1.0, 1.0));
                    let vz = if dx < 0.0 { w * (-dx / geom.rear_um).min(1.0) } else { -0.1 * w };
                    u = Vec3::new(vx, 0.3 * w * dy / b, vz)
                        + Vec3::new(u_noise.sample(&mut rng), u_noise.sample(&mut rng), u_noise.sample(&mut rng));
                }
                let cell = CellRecord {
                    alpha_g: 0.0,
                    alpha_s: (1.0 - alpha_l) as f32,
                    alpha_l: alpha_l as f32,
                    temperature: t as f32,
                    pressure: (mat.p0_pa + recoil_pressure(t, mat)) as f32,
                    density: mat.density(t) as f32,
                    velocity: Vec3::new(u.x as f32, u.y as f32, u.z as f32),
                };
                bundle.set_cell_flat(meta.flatten(i, j, k), cell);
            }
        }
    }
    let radius = cfg.spatter_radius_cells * cfg.spacing_um;
    for d in droplets.iter().filter(|d| d.birth_frame <= f) {
        let age = (f - d.birth_frame) as f64 * cfg.dt_us;
        let t = d.temperature - 2.0 * age;
        let u = d.velocity - Vec3::new(0.0, 0.0, GRAVITY_UM_US2 * age);
        let cell = CellRecord {
            alpha_g: 0.0,
            alpha_s: 0.0,
            alpha_l: 1.0,
            temperature: t as f32,
            pressure: d.pressure as f32,
            density: mat.density(t) as f32,
            velocity: Vec3::new(u.x as f32, u.y as f32, u.z as f32),
        };
        for idx in ball_cells(&meta, d.center(age), radius) {
            if bundle.alpha_g[idx] == 1.0 {
                bundle.set_cell_flat(idx, cell);
            }
        }
    }
    bundle
}

/// Generates `cfg.frames` bundles of a single track plus the ledger of
/// injected droplets. Frames render in parallel; droplet draws use stream 0
/// of `cfg.seed` and frame `f` noise uses stream `f + 1`.
pub fn surrogate_run(params: &ProcessParams, mat: &MaterialParams, cfg: &SurrogateConfig) -> Result<SurrogateRun> {
    mat.check()?;
    cfg.check()?;
    let geom = pool_geometry(params, mat, cfg)?;
    let lay = layout(params, &geom, cfg)?;
    let lambda = spatter_lambda(&geom, mat, cfg);
    let (droplets, redrawn) = draw_droplets(params, mat, cfg, &geom, &lay, lambda)?;
    let frames: Vec<FieldBundle> =
        (0..cfg.frames).into_par_iter().map(|f| render_frame(f, params, mat, cfg, &geom, &lay, &droplets)).collect();
    let radius = cfg.spatter_radius_cells * cfg.spacing_um;
    let spatter = droplets
        .iter()
        .enumerate()
        .map(|(id, d)| {
            let frames = (d.birth_frame..cfg.frames)
                .filter_map(|f| {
                    let c = d.center((f - d.birth_frame) as f64 * cfg.dt_us);
                    let n = ball_cells(&lay.meta, c, radius).len();
                    (n > 0).then_some(TruthFrame { frame: f, center_um: [c.x, c.y, c.z], n_cells: n })
                })
                .collect();
            SpatterTruth {
                id: id as u64,
                birth_frame: d.birth_frame,
                birth_time_us: d.birth_frame as f64 * cfg.dt_us,
                velocity_m_s: [d.velocity.x, d.velocity.y, d.velocity.z],
                temperature_k: d.temperature,
                initial_cells: ball_cells(&lay.meta, d.origin, radius)
                    .into_iter()
                    .map(|idx| lay.meta.unflatten(idx).map(|v| v as u32))
                    .collect(),
                frames,
            }
        })
        .collect();
    Ok(SurrogateRun {
        frames,
        truth: GroundTruth {
            params: *params,
            seed: cfg.seed,
            frames: cfg.frames,
            dt_us: cfg.dt_us,
            lambda_per_frame: lambda,
            geometry: geom,
            redrawn,
            spatter,
        },
        layout: lay,
    })
}

/// Melt-pool width and depth measured from the `alpha_l = 0.5` crossings of
/// a bundle, interpolating linearly between neighboring cell centers.
/// `None` when no cell is liquid.
pub fn melt_pool_dimensions(bundle: &FieldBundle) -> Option<(f64, f64)> {
    let meta = &bundle.meta;
    let [nx, ny, nz] = meta.dims;
    let h = meta.spacing_um;
    let liquid = |i, j, k| f64::from(bundle.alpha_l[meta.flatten(i, j, k)]);
    let cross = |inside: f64, outside: f64, a_in: f64, a_out: f64| inside + (a_in - 0.5) / (a_in - a_out) * (outside - inside);
    let mut width: Option<f64> = None;
    for k in 0..nz {
        for i in 0..nx {
            let run: Vec<usize> = (0..ny).filter(|&j| liquid(i, j, k) > 0.5).collect();
            let (Some(&jl), Some(&jr)) = (run.first(), run.last()) else { continue };
            let y = |j: usize| meta.cell_center(i, j, k).y;
            let left = if jl > 0 { cross(y(jl), y(jl - 1), liquid(i, jl, k), liquid(i, jl - 1, k)) } else { y(jl) - h[1] / 2.0 };
            let right =
                if jr + 1 < ny { cross(y(jr), y(jr + 1), liquid(i, jr, k), liquid(i, jr + 1, k)) } else { y(jr) + h[1] / 2.0 };
            width = Some(width.map_or(right - left, |w: f64| w.max(right - left)));
        }
    }
    let mut depth: Option<f64> = None;
    for j in 0..ny {
        for i in 0..nx {
            let Some(top) = (0..nz).rev().find(|&k| f64::from(bundle.alpha_g[meta.flatten(i, j, k)]) <= 0.5) else { continue };
            let Some(kl) = (0..=top).find(|&k| liquid(i, j, k) > 0.5) else { continue };
            let z = |k: usize| meta.cell_center(i, j, k).z;
            let surface = z(top) + h[2] / 2.0;
            let bottom = if kl > 0 { cross(z(kl), z(kl - 1), liquid(i, j, kl), liquid(i, j, kl - 1)) } else { z(kl) - h[2] / 2.0 };
            depth = Some(depth.map_or(surface - bottom, |d: f64| d.max(surface - bottom)));
        }
    }
    width.zip(depth)
}

/// Draw order of generated features; speed is derived.
pub const GEN_FEATURES: [&str; 9] = ["x", "y", "z", "vx", "vy", "vz", "T", "rho", "p"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGaussian {
    /// Means in [`GEN_FEATURES`] order.
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl ClassGaussian {
    /// Independent features with the given standard deviations, plus
    /// optional `(a, b, rho)` correlations.
    pub fn with_std(mean: [f64; 9], std: [f64; 9], correlations: &[(usize, usize, f64)]) -> Self {
        let mut cov = vec![vec![0.0; 9]; 9];
        for a in 0..9 {
            cov[a][a] = std[a] * std[a];
        }
        for &(a, b, r) in correlations {
            cov[a][b] = r * std[a] * std[b];
            cov[b][a] = cov[a][b];
        }
        Self { mean: mean.to_vec(), cov }
    }

    /// Lower Cholesky factor of the covariance.
    fn cholesky(&self, name: &str) -> Result<DMatrix<f64>> {
        let d = GEN_FEATURES.len();
        if self.mean.len() != d || self.cov.len() != d || self.cov.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidParameter(format!("{name} class needs a {d}-mean and a {d}x{d} covariance")));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| self.cov[i][j]);
        if cov != cov.transpose() {
            return Err(Error::InvalidParameter(format!("{name} covariance is not symmetric")));
        }
        cov.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::InvalidParameter(format!("{name} covariance is not positive definite")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassModel {
    pub meltpool: ClassGaussian,
    pub spatter: ClassGaussian,
}

impl Default for ClassModel {
    fn default() -> Self {
        Self::paper_like()
    }
}

impl ClassModel {
    /// Spatter: wider spatial and velocity spread, backward-upward motion,
    /// temperature and pressure concentrated in a narrow band. Melt pool:
    /// compact in space and velocity, wide in temperature and pressure.
    pub fn paper_like() -> Self {
        let (t, p) = (6, 8);
        Self {
            meltpool: ClassGaussian::with_std(
                [0.0, 0.0, -10.0, -0.3, 0.0, 0.0, 2400.0, 6500.0, 1.08e5],
                [40.0, 25.0, 8.0, 0.5, 0.5, 0.3, 380.0, 50.0, 0.25e5],
                &[(t, p, 0.7)],
            ),
            spatter: ClassGaussian::with_std(
                [-60.0, 0.0, 40.0, -2.5, 0.0, 3.5, 3000.0, 6520.0, 1.35e5],
                [90.0, 70.0, 45.0, 2.5, 0.6, 2.5, 90.0, 70.0, 0.08e5],
                &[(t, p, 0.8)],
            ),
        }
    }
}

/// `n / 2` records per class drawn from the class Gaussians, melt pool
/// first; speed is recomputed from the drawn components.
pub fn gen_dataset(model: &ClassModel, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidParameter(format!("n must be even and positive, got {n}")));
    }
    let factors = [(Label::Meltpool, &model.meltpool, "meltpool"), (Label::Spatter, &model.spatter, "spatter")]
        .map(|(label, g, name)| g.cholesky(name).map(|l| (label, g, l)));
    let mut rng = member_rng(seed, 0);
    let mut records = Vec::with_capacity(n);
    for f in factors {
        let (label, g, l) = f?;
        for _ in 0..n / 2 {
            let z: Vec<f64> = (0..9).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..9).map(|i| g.mean[i] + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>()).collect();
            records.push(SampleRecord {
                x: v[0],
                y: v[1],
                z: v[2],
                vx: v[3],
                vy: v[4],
                vz: v[5],
                vmag: (v[3] * v[3] + v[4] * v[4] + v[5] * v[5]).sqrt(),
                t: v[6],
                rho: v[7],
                p: v[8],
                label,
            });
        }
    }
    let mut ds = Dataset::from_records(&records);
    ds.provenance.push(RunProvenance { run_id: "synthetic".into(), seed: Some(seed), n_spatter: n / 2, n_meltpool: n / 2 });
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{segment, SegmentParams};

    #[test]
    fn beam_center_and_one_radius() {
        let p = ProcessParams::new(300.0, 1.0);
        let center: f64 = beam_intensity(0.0, &p);
        let expected = 2.0 * 0.55 * 300.0 / (std::f64::consts::PI * 50e-6 * 50e-6);
        assert!((center - expected).abs() / expected < 1e-12);
        assert!((center / 4.20e10 - 1.0).abs() < 0.005);
        let edge: f64 = beam_intensity(50.0, &p);
        assert!((edge / center - (-2.0f64).exp()).abs() < 1e-12);
        let doubled: f64 = beam_intensity(20.0, &ProcessParams::new(600.0, 1.0));
        assert!((doubled / beam_intensity::<f64>(20.0, &p) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn recoil_at_vapor_temperature() {
        let mat = MaterialParams::ss316l();
        let p: f64 = recoil_pressure(mat.t_vapor_k, &mat);
        assert!((p - 54_715.5).abs() / 54_715.5 < 1e-9);
        assert!(recoil_pressure(3000.0, &mat) < p);
        assert!(recoil_pressure(2000.0f64, &mat) < recoil_pressure(2500.0, &mat));
    }

    #[test]
    fn recoil_matches_high_precision_evaluation() {
        // same expression evaluated with 50-digit arithmetic
        let reference = 365_775.071_488_316_239_323_586_9;
        let p: f64 = recoil_pressure(3500.0, &MaterialParams::ss316l());
        assert!((p - reference).abs() / reference < 1e-12, "{p}");
    }

    #[test]
    fn calibration_is_exact_at_anchors() {
        let mat = MaterialParams::ss316l();
        for c in &mat.calibration {
            assert_eq!(mat.calibrated_dims(c.power_w), (c.width_um, c.depth_um));
        }
        let (w, d) = mat.calibrated_dims(225.0);
        assert_eq!((w, d), (120.0, 55.5));
    }

    #[test]
    fn material_check_rejects_bad_order() {
        let mut mat = MaterialParams::ss316l();
        mat.t_solidus_k = 1800.0;
        assert!(mat.check().is_err());
        let mut mat = MaterialParams::ss316l();
        mat.calibration[1].width_um = 90.0;
        assert!(mat.check().is_err());
    }

    #[test]
    fn measured_dims_match_table_at_one_meter_per_second() {
        let mat = MaterialParams::ss316l();
        let cfg = SurrogateConfig { frames: 1, spatter_rate: 0.0, spacing_um: 2.5, gas_um: 10.0, ..Default::default() };
        for c in &mat.calibration {
            let run = surrogate_run(&ProcessParams::new(c.power_w, 1.0), &mat, &cfg).unwrap();
            let (w, d) = melt_pool_dimensions(&run.frames[0]).unwrap();
            assert!((w - c.width_um).abs() <= 1.0, "{} W width {w}", c.power_w);
            assert!((d - c.depth_um).abs() <= 1.0, "{} W depth {d}", c.power_w);
        }
    }

    #[test]
    fn zero_rate_gives_only_the_composite() {
        let cfg = SurrogateConfig { frames: 3, spatter_rate: 0.0, ..Default::default() };
        let run = surrogate_run(&ProcessParams::new(300.0, 1.0), &MaterialParams::ss316l(), &cfg).unwrap();
        assert!(run.truth.spatter.is_empty());
        for b in &run.frames {
            assert!(crate::fieldstore::validate(b).is_empty());
            let (_, seg) = segment::<f64>(b, &SegmentParams::default()).unwrap();
            assert!(seg.spatter.is_empty());
        }
    }

    #[test]
    fn injected_droplets_segment_separately() {
        let cfg = SurrogateConfig {
            frames: 4,
            spatter_rate: 3.0,
            ejection_speed_m_s: [2.5, 4.5],
            min_spacing_um: 40.0,
            seed: 5,
            ..Default::default()
        };
        let run = surrogate_run(&ProcessParams::new(400.0, 0.8), &MaterialParams::ss316l(), &cfg).unwrap();
        assert!(!run.truth.spatter.is_empty());
        let last = run.frames.len() - 1;
        let expected = run.truth.spatter.iter().filter(|s| s.frames.iter().any(|f| f.frame == last && f.n_cells >= 8)).count();
        let (_, seg) = segment::<f64>(&run.frames[last], &SegmentParams::default()).unwrap();
        assert_eq!(seg.spatter.len(), expected);
        for s in &run.truth.spatter {
            let v = Vec3::new(s.velocity_m_s[0], s.velocity_m_s[1], s.velocity_m_s[2]);
            assert!(v.x < 0.0 && v.z > 0.0);
            assert!((2.5..=4.5).contains(&v.norm()));
        }
    }

    #[test]
    fn lambda_monotone_in_power_and_speed() {
        let mat = MaterialParams::ss316l();
        let cfg = SurrogateConfig::default();
        let lam = |p: f64, v: f64| spatter_lambda(&pool_geometry(&ProcessParams::new(p, v), &mat, &cfg).unwrap(), &mat, &cfg);
        for v in [0.3, 1.0, 2.0] {
            assert!(lam(150.0, v) < lam(300.0, v) && lam(300.0, v) < lam(500.0, v));
        }
        for p in [150.0, 450.0] {
            assert!(lam(p, 0.3) > lam(p, 1.0) && lam(p, 1.0) > lam(p, 2.0));
        }
    }

    #[test]
    fn too_small_domain_is_rejected() {
        let cfg = SurrogateConfig { dims: Some([10, 10, 10]), ..Default::default() };
        assert!(surrogate_run(&ProcessParams::new(300.0, 1.0), &MaterialParams::ss316l(), &cfg).is_err());
    }

    #[test]
    fn frames_are_deterministic() {
        let cfg = SurrogateConfig { frames: 2, spatter_rate: 2.0, seed: 3, ..Default::default() };
        let a = surrogate_run(&ProcessParams::new(300.0, 1.0), &MaterialParams::ss316l(), &cfg).unwrap();
        let b = surrogate_run(&ProcessParams::new(300.0, 1.0), &MaterialParams::ss316l(), &cfg).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn gen_dataset_counts_and_speed() {
        let ds = gen_dataset(&ClassModel::paper_like(), 488, 1).unwrap();
        assert_eq!(ds.class_counts(), (244, 244));
        ds.check().unwrap();
        assert!(gen_dataset(&ClassModel::paper_like(), 7, 1).is_err());
        let mut bad = ClassModel::paper_like();
        bad.spatter.cov[0][0] = -1.0;
        assert!(gen_dataset(&bad, 10, 1).is_err());
    }

    #[test]
    fn gen_dataset_recovers_moments() {
        let model = ClassModel::paper_like();
        let ds = gen_dataset(&model, 40_000, 2).unwrap();
        let spatter: Vec<usize> = (0..ds.n_rows()).filter(|&i| ds.labels[i] == Label::Spatter).collect();
        let t = ds.feature_index("T").unwrap();
        let p = ds.feature_index("p").unwrap();
        let n = spatter.len() as f64;
        let mt = spatter.iter().map(|&i| ds.row(i)[t]).sum::<f64>() / n;
        let mp = spatter.iter().map(|&i| ds.row(i)[p]).sum::<f64>() / n;
        let cov = spatter.iter().map(|&i| (ds.row(i)[t] - mt) * (ds.row(i)[p] - mp)).sum::<f64>() / n;
        assert!((mt - 3000.0).abs() < 3.0);
        assert!((cov / model.spatter.cov[6][8] - 1.0).abs() < 0.05);
    }
}
