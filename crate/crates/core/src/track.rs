//! Frame-to-frame spatter linking: predict, correlate, assign.
//!
//! Each blob's centroid is advanced by its mean cell velocity over one frame
//! interval. Every prediction proposes its nearest next-frame centroid
//! within the gating radius; proposals are accepted in ascending distance,
//! one-to-one. Unmatched previous blobs end their trajectories and unmatched
//! next blobs open new ones.
//!
//! Units: µm, µs and m/s. Since 1 m/s = 1 µm/µs, displacement is simply
//! `dt * velocity`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::kdtree::{brute_force_nearest_within, KdTree};
use crate::num::Real;
use crate::segment::Blob;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Frame interval in µs.
    pub dt_us: f64,
    /// Gating radius in µm.
    pub max_dist_um: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { dt_us: 5.0, max_dist_um: 25.0 }
    }
}

impl TrackerConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.dt_us > 0.0 && self.max_dist_um > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tracker needs dt > 0 and max_dist > 0, got dt={} max_dist={}",
                self.dt_us, self.max_dist_um
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkResult {
    /// `(prev index, next index)` pairs, sorted by prev index.
    pub continued: Vec<(usize, usize)>,
    pub terminated: Vec<usize>,
    pub born: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Active,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation<T> {
    pub time_us: T,
    pub blob: Blob<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub id: u64,
    pub observations: Vec<Observation<T>>,
    pub status: TrajectoryStatus,
}

/// Predicted centroids after one interval: `centroid + dt * mean_u`.
pub fn predict_positions<T: Real>(blobs: &[Blob<T>], dt_us: T) -> Vec<Vec3<T>> {
    blobs.iter().map(|b| b.centroid + b.mean_u * dt_us).collect()
}

/// Nearest-neighbor backend for [`link_frames_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborSearch {
    KdTree,
    BruteForce,
}

pub fn link_frames<T: Real>(prev: &[Blob<T>], next: &[Blob<T>], cfg: &TrackerConfig) -> LinkResult {
    link_frames_with(prev, next, cfg, NeighborSearch::KdTree)
}

pub fn link_frames_with<T: Real>(
    prev: &[Blob<T>],
    next: &[Blob<T>],
    cfg: &TrackerConfig,
    search: NeighborSearch,
) -> LinkResult {
    let predictions = predict_positions(prev, T::lit(cfg.dt_us));
    let targets: Vec<Vec3<T>> = next.iter().map(|b| b.centroid).collect();
    let r2 = T::lit(cfg.max_dist_um) * T::lit(cfg.max_dist_um);
    let tree = (search == NeighborSearch::KdTree).then(|| KdTree::build(&targets));
    let mut candidates: Vec<(T, usize, usize)> = predictions
        .iter()
        .enumerate()
        .filter_map(|(i, &q)| {
            let hit = match &tree {
                Some(t) => t.nearest_within(q, r2),
                None => brute_force_nearest_within(&targets, q, r2),
            };
            hit.map(|(j, d2)| (d2, i, j))
        })
        .collect();
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));

    let mut prev_taken = vec![false; prev.len()];
    let mut next_taken = vec![false; next.len()];
    let mut continued = Vec::new();
    for (_, i, j) in candidates {
        if !prev_taken[i] && !next_taken[j] {
            prev_taken[i] = true;
            next_taken[j] = true;
            continued.push((i, j));
        }
    }
    continued.sort_unstable();
    LinkResult {
        continued,
        terminated: (0..prev.len()).filter(|&i| !prev_taken[i]).collect(),
        born: (0..next.len()).filter(|&j| !next_taken[j]).collect(),
    }
}

/// Trajectory bookkeeping across frames.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackState<T> {
    pub trajectories: Vec<Trajectory<T>>,
    /// Trajectory slot for each blob of the most recent frame.
    pub frame_slots: Vec<usize>,
    next_id: u64,
}

impl<T: Real> TrackState<T> {
    pub fn new() -> Self {
        Self { trajectories: Vec::new(), frame_slots: Vec::new(), next_id: 0 }
    }

    pub fn active(&self) -> impl Iterator<Item = &Trajectory<T>> {
        self.trajectories.iter().filter(|t| t.status == TrajectoryStatus::Active)
    }

    /// Applies a frame link. `next` are the blobs of the new frame the link
    /// was computed against.
    pub fn update(&mut self, link: &LinkResult, next: &[Blob<T>], next_time: T) -> Result<()> {
        let n_prev = self.frame_slots.len();
        let bad = link
            .continued
            .iter()
            .flat_map(|&(i, j)| [(i, n_prev, "prev"), (j, next.len(), "next")])
            .chain(link.terminated.iter().map(|&i| (i, n_prev, "prev")))
            .chain(link.born.iter().map(|&j| (j, next.len(), "next")))
            .find(|&(idx, len, _)| idx >= len);
        if let Some((idx, len, side)) = bad {
            return Err(Error::InvalidParameter(format!("link references {side} blob {idx}, frame has {len}")));
        }
        for &(i, _) in &link.continued {
            let traj = &self.trajectories[self.frame_slots[i]];
            if let Some(last) = traj.observations.last() {
                if next_time <= last.time_us {
                    return Err(Error::InvalidParameter(format!(
                        "frame time {next_time} does not advance past {}",
                        last.time_us
                    )));
                }
            }
        }
        let mut slots = vec![usize::MAX; next.len()];
        for &(i, j) in &link.continued {
            let slot = self.frame_slots[i];
            let traj = &mut self.trajectories[slot];
            if traj.status == TrajectoryStatus::Terminated {
                return Err(Error::InvalidParameter(format!("trajectory {} already terminated", traj.id)));
            }
            traj.observations.push(Observation { time_us: next_time, blob: next[j].clone() });
            slots[j] = slot;
        }
        for &i in &link.terminated {
            self.trajectories[self.frame_slots[i]].status = TrajectoryStatus::Terminated;
        }
        for &j in &link.born {
            slots[j] = self.trajectories.len();
            self.trajectories.push(Trajectory {
                id: self.next_id,
                observations: vec![Observation { time_us: next_time, blob: next[j].clone() }],
                status: TrajectoryStatus::Active,
            });
            self.next_id += 1;
        }
        self.frame_slots = slots;
        Ok(())
    }
}

/// Runs linking over a time-ordered sequence of frames.
#[derive(Clone, Debug)]
pub struct Tracker<T> {
    pub cfg: TrackerConfig,
    pub state: TrackState<T>,
    last: Option<Vec<Blob<T>>>,
    /// Link result of each pushed frame (the first frame: all born).
    pub links: Vec<LinkResult>,
}

impl<T: Real> Tracker<T> {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.check()?;
        Ok(Self { cfg, state: TrackState::new(), last: None, links: Vec::new() })
    }

    pub fn push_frame(&mut self, time_us: T, blobs: Vec<Blob<T>>) -> Result<&LinkResult> {
        let link = match &self.last {
            Some(prev) => link_frames(prev, &blobs, &self.cfg),
            None => LinkResult { born: (0..blobs.len()).collect(), ..Default::default() },
        };
        self.state.update(&link, &blobs, time_us)?;
        self.last = Some(blobs);
        self.links.push(link);
        Ok(self.links.last().expect("just pushed"))
    }

    /// Terminates every still-active trajectory and returns the final state.
    pub fn finish(mut self) -> TrackState<T> {
        for t in &mut self.state.trajectories {
            t.status = TrajectoryStatus::Terminated;
        }
        self.state
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicStep<T> {
    pub time_us: T,
    /// µm
    pub displacement: Vec3<T>,
    /// m/s
    pub speed: T,
    /// `None` when the blob did not move.
    pub direction: Option<Vec3<T>>,
}

/// Per-step displacement, speed and direction from consecutive centroids.
pub fn kinematics<T: Real>(traj: &Trajectory<T>) -> Result<Vec<KinematicStep<T>>> {
    if traj.observations.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "trajectory {} has {} observation(s); kinematics needs 2",
            traj.id,
            traj.observations.len()
        )));
    }
    Ok(traj
        .observations
        .windows(2)
        .map(|w| {
            let displacement = w[1].blob.centroid - w[0].blob.centroid;
            let dt = w[1].time_us - w[0].time_us;
            KinematicStep {
                time_us: w[1].time_us,
                displacement,
                speed: displacement.norm() / dt,
                direction: displacement.normalized(),
            }
        })
        .collect())
}

pub const TRAJECTORIES_CSV_HEADER: [&str; 15] = [
    "traj_id", "time_us", "blob_id", "cx_um", "cy_um", "cz_um", "ux", "uy", "uz", "speed", "T", "rho", "p", "n_cells",
    "status",
];

pub fn trajectories_csv<T: Real>(state: &TrackState<T>) -> String {
    use crate::io_util::fmt_f64;
    let rows = state.trajectories.iter().flat_map(|t| {
        let status = match t.status {
            TrajectoryStatus::Active => "active",
            TrajectoryStatus::Terminated => "terminated",
        };
        t.observations.iter().map(move |o| {
            let b = &o.blob;
            let mut r = vec![t.id.to_string(), fmt_f64(o.time_us.as_f64()), b.id.to_string()];
            r.extend(
                [b.centroid.x, b.centroid.y, b.centroid.z, b.mean_u.x, b.mean_u.y, b.mean_u.z, b.speed, b.mean_t, b.mean_rho, b.mean_p]
                    .iter()
                    .map(|v| fmt_f64(v.as_f64())),
            );
            r.push(b.n_cells.to_string());
            r.push(status.to_string());
            r
        })
    });
    crate::io_util::csv_text(&TRAJECTORIES_CSV_HEADER, rows)
}

#[cfg(test)]
pub(crate) fn point_blob<T: Real>(id: u32, centroid: Vec3<T>, mean_u: Vec3<T>) -> Blob<T> {
    Blob {
        id,
        cells: vec![],
        n_cells: 8,
        volume: T::lit(8.0),
        centroid,
        mean_u,
        speed: mean_u.norm(),
        mean_t: T::lit(2000.0),
        mean_rho: T::lit(6500.0),
        mean_p: T::lit(101325.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn prediction_hand_cases() {
        let still = point_blob(1, v(3.0, 4.0, 5.0), Vec3::zero());
        assert_eq!(predict_positions(&[still], 5.0), vec![v(3.0, 4.0, 5.0)]);
        let moving = point_blob(1, Vec3::zero(), v(10.0, 0.0, 0.0));
        assert_eq!(predict_positions(&[moving], 5.0), vec![v(50.0, 0.0, 0.0)]);
    }

    #[test]
    fn prediction_uses_cell_average_velocity() {
        use crate::fieldstore::{test_liquid_cell, FieldBundle, GridMeta};
        use crate::segment::blob_properties;
        let meta = GridMeta::new([2, 1, 1], [1.0; 3], [0.0; 3], 0.0).unwrap();
        let mut b = FieldBundle::filled(meta, test_liquid_cell());
        b.velocity = [vec![1.0, 3.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let blob = blob_properties::<f64>(&b, 1, &[0, 1]).unwrap();
        let p = predict_positions(&[blob.clone()], 5.0)[0];
        assert_eq!(p - blob.centroid, v(10.0, 0.0, 0.0));
    }

    #[test]
    fn link_stationary_and_gated() {
        let cfg = TrackerConfig { dt_us: 5.0, max_dist_um: 40.0 };
        let b = point_blob(1, v(1.0, 1.0, 1.0), Vec3::zero());
        let r = link_frames(&[b.clone()], &[b], &cfg);
        assert_eq!(r.continued, vec![(0, 0)]);

        let prev = point_blob(1, Vec3::zero(), Vec3::zero());
        let next = point_blob(1, v(50.0, 0.0, 0.0), Vec3::zero());
        let r = link_frames(&[prev], &[next], &cfg);
        assert_eq!((r.continued.len(), r.terminated, r.born), (0, vec![0], vec![0]));
    }

    #[test]
    fn conflict_goes_to_closer_prediction() {
        let cfg = TrackerConfig { dt_us: 5.0, max_dist_um: 25.0 };
        let prev = [point_blob(1, v(-9.0, 0.0, 0.0), Vec3::zero()), point_blob(2, v(5.0, 0.0, 0.0), Vec3::zero())];
        let next = [point_blob(1, Vec3::zero(), Vec3::zero())];
        let r = link_frames(&prev, &next, &cfg);
        assert_eq!((r.continued, r.terminated, r.born), (vec![(1, 0)], vec![0], vec![]));
    }

    #[test]
    fn state_lifecycle() {
        let mut st = TrackState::<f64>::new();
        let blobs: Vec<_> = (0..3).map(|i| point_blob(i, v(i as f64 * 100.0, 0.0, 0.0), Vec3::zero())).collect();
        let born = LinkResult { born: vec![0, 1, 2], ..Default::default() };
        st.update(&born, &blobs, 0.0).unwrap();
        assert_eq!(st.active().count(), 3);
        assert!(st.trajectories.iter().all(|t| t.observations.len() == 1));

        let link = LinkResult { continued: vec![(0, 0), (2, 1)], terminated: vec![1], born: vec![] };
        st.update(&link, &blobs[..2], 5.0).unwrap();
        assert_eq!(st.trajectories[1].status, TrajectoryStatus::Terminated);
        assert_eq!(st.trajectories[1].observations.len(), 1);
        assert_eq!(st.trajectories[2].observations.len(), 2);

        let bad = LinkResult { continued: vec![(5, 0)], ..Default::default() };
        assert!(st.update(&bad, &blobs, 10.0).is_err());
        let stale = LinkResult { continued: vec![(0, 0)], terminated: vec![1], born: vec![] };
        assert!(st.update(&stale, &blobs[..1], 5.0).is_err());
    }

    #[test]
    fn kinematics_cases() {
        let obs = |t: f64, x: f64| Observation { time_us: t, blob: point_blob(1, v(x, 0.0, 0.0), Vec3::zero()) };
        let traj = Trajectory { id: 0, observations: vec![obs(0.0, 0.0), obs(5.0, 50.0)], status: TrajectoryStatus::Active };
        let k = kinematics(&traj).unwrap();
        assert_eq!(k[0].speed, 10.0);
        assert_eq!(k[0].direction, Some(v(1.0, 0.0, 0.0)));

        let still = Trajectory { id: 1, observations: vec![obs(0.0, 3.0), obs(5.0, 3.0)], status: TrajectoryStatus::Active };
        let k = kinematics(&still).unwrap();
        assert_eq!((k[0].speed, k[0].direction), (0.0, None));

        let short = Trajectory { id: 2, observations: vec![obs(0.0, 0.0)], status: TrajectoryStatus::Active };
        assert!(kinematics(&short).is_err());
    }
}
