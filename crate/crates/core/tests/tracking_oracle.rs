use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatter_core::geom::Vec3;
use spatter_core::segment::{segment, Blob, SegmentParams};
use spatter_core::synthgen::{surrogate_run, MaterialParams, ProcessParams, SurrogateConfig};
use spatter_core::track::{kinematics, link_frames, link_frames_with, NeighborSearch, Tracker, TrackerConfig};

fn blob(id: u32, c: Vec3<f64>, u: Vec3<f64>) -> Blob<f64> {
    Blob {
        id,
        cells: vec![],
        n_cells: 8,
        volume: 8.0,
        centroid: c,
        mean_u: u,
        speed: u.norm(),
        mean_t: 2000.0,
        mean_rho: 6500.0,
        mean_p: 101325.0,
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, half: f64) -> Vec3<f64> {
    Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

/// Best one-to-one gated assignment by enumeration: most matches, then
/// least total distance.
fn exhaustive(prev: &[Blob<f64>], next: &[Blob<f64>], cfg: &TrackerConfig) -> Vec<(usize, usize)> {
    fn go(
        i: usize,
        d: &[Vec<Option<f64>>],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        cost: f64,
        best: &mut (usize, f64, Vec<(usize, usize)>),
    ) {
        if i == d.len() {
            if cur.len() > best.0 || (cur.len() == best.0 && cost < best.1) {
                *best = (cur.len(), cost, cur.clone());
            }
            return;
        }
        go(i + 1, d, used, cur, cost, best);
        for j in 0..used.len() {
            if let (false, Some(dist)) = (used[j], d[i][j]) {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, d, used, cur, cost + dist, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let d: Vec<Vec<Option<f64>>> = prev
        .iter()
        .map(|p| {
            let q = p.centroid + p.mean_u * cfg.dt_us;
            next.iter()
                .map(|n| {
                    let dist = (n.centroid - q).norm();
                    (dist <= cfg.max_dist_um).then_some(dist)
                })
                .collect()
        })
        .collect();
    let mut best = (0, f64::INFINITY, vec![]);
    go(0, &d, &mut vec![false; next.len()], &mut vec![], 0.0, &mut best);
    best.2
}

/// Frames on a lattice whose pitch exceeds twice the gate, with some
/// blobs vanishing and some appearing.
fn separated_frames(seed: u64, cfg: &TrackerConfig) -> (Vec<Blob<f64>>, Vec<Blob<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pitch = 8.0 * cfg.max_dist_um;
    let n = rng.random_range(1..7);
    let mut prev = Vec::new();
    let mut next = Vec::new();
    for i in 0..n {
        let c = Vec3::new(pitch * i as f64, 0.0, 0.0);
        let u = rand_vec(&mut rng, cfg.max_dist_um / cfg.dt_us);
        prev.push(blob(i as u32, c, u));
        if rng.random_bool(0.8) {
            let jitter = rand_vec(&mut rng, 0.5 * cfg.max_dist_um);
            next.push(blob(next.len() as u32, c + u * cfg.dt_us + jitter, u));
        }
        if rng.random_bool(0.3) {
            next.push(blob(next.len() as u32, c + Vec3::new(0.0, pitch / 2.0, 0.0), u));
        }
    }
    (prev, next)
}

#[test]
fn greedy_matches_exhaustive_on_separated_frames() {
    let cfg = TrackerConfig { dt_us: 5.0, max_dist_um: 10.0 };
    for seed in 0..2000 {
        let (prev, next) = separated_frames(seed, &cfg);
        let got = link_frames(&prev, &next, &cfg);
        let mut want = exhaustive(&prev, &next, &cfg);
        want.sort_unstable();
        assert_eq!(got.continued, want, "seed {seed}");
        assert_eq!(got.continued.len() + got.terminated.len(), prev.len());
        assert_eq!(got.continued.len() + got.born.len(), next.len());
    }
}

#[test]
fn kdtree_and_brute_force_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let cfg = TrackerConfig { dt_us: rng.random_range(0.5..10.0), max_dist_um: rng.random_range(1.0..40.0) };
        let np = rng.random_range(0..40);
        let nn = rng.random_range(0..40);
        let prev: Vec<_> = (0..np).map(|i| blob(i, rand_vec(&mut rng, 100.0), rand_vec(&mut rng, 3.0))).collect();
        let next: Vec<_> = (0..nn).map(|i| blob(i, rand_vec(&mut rng, 100.0), Vec3::zero())).collect();
        assert_eq!(
            link_frames_with(&prev, &next, &cfg, NeighborSearch::KdTree),
            link_frames_with(&prev, &next, &cfg, NeighborSearch::BruteForce)
        );
    }
}

proptest! {
    #[test]
    fn ballistic_points_give_exact_speed(
        ux in -8.0f64..8.0, uy in -8.0f64..8.0, uz in 0.5f64..8.0,
        x0 in -50.0f64..50.0, dt in 0.5f64..5.0, frames in 2usize..12,
    ) {
        let u = Vec3::new(ux, uy, uz);
        let cfg = TrackerConfig { dt_us: dt, max_dist_um: 5.0 };
        let mut tracker = Tracker::new(cfg).unwrap();
        for k in 0..frames {
            let t = k as f64 * dt;
            let c = Vec3::new(x0, 0.0, 0.0) + u * t;
            tracker.push_frame(t, vec![blob(0, c, u)]).unwrap();
        }
        let state = tracker.finish();
        prop_assert_eq!(state.trajectories.len(), 1);
        let traj = &state.trajectories[0];
        prop_assert_eq!(traj.observations.len(), frames);
        for (k, o) in traj.observations.iter().enumerate() {
            prop_assert!((o.time_us - k as f64 * dt).abs() <= 1e-12 * (1.0 + k as f64 * dt));
        }
        for step in kinematics(traj).unwrap() {
            prop_assert!((step.speed - u.norm()).abs() <= 1e-9);
        }
    }
}

#[test]
fn ten_meters_per_second_over_five_microseconds_is_fifty_microns() {
    let u = Vec3::new(10.0, 0.0, 0.0);
    let cfg = TrackerConfig { dt_us: 5.0, max_dist_um: 5.0 };
    let mut tracker = Tracker::new(cfg).unwrap();
    tracker.push_frame(0.0, vec![blob(0, Vec3::zero(), u)]).unwrap();
    tracker.push_frame(5.0, vec![blob(0, Vec3::new(50.0, 0.0, 0.0), u)]).unwrap();
    let state = tracker.finish();
    let steps = kinematics(&state.trajectories[0]).unwrap();
    assert!((steps[0].displacement.x - 50.0).abs() < 1e-12);
    assert!((steps[0].speed - 10.0).abs() < 1e-12);
}

/// Fraction of injected droplets whose detections all land in one trajectory.
fn surrogate_recovery(seed: u64) -> (usize, usize) {
    let cfg = SurrogateConfig {
        frames: 8,
        dt_us: 2.0,
        spatter_rate: 4.0,
        ejection_speed_m_s: [2.5, 4.5],
        min_spacing_um: 30.0,
        seed,
        ..Default::default()
    };
    let run = surrogate_run(&ProcessParams::new(400.0, 0.8), &MaterialParams::ss316l(), &cfg).unwrap();
    let tcfg = TrackerConfig { dt_us: cfg.dt_us, max_dist_um: 12.0 };
    let mut tracker = Tracker::new(tcfg).unwrap();
    let mut detections = Vec::new();
    for b in &run.frames {
        let (_, seg) = segment::<f64>(b, &SegmentParams::default()).unwrap();
        detections.push(seg.spatter.clone());
        tracker.push_frame(b.meta.time_us, seg.spatter).unwrap();
    }
    let state = tracker.finish();
    let mut owner = HashMap::new();
    for t in &state.trajectories {
        for o in &t.observations {
            owner.insert((o.time_us.to_bits(), o.blob.id), t.id);
        }
    }
    let mut total = 0;
    let mut recovered = 0;
    for s in &run.truth.spatter {
        let mut ids = Vec::new();
        for f in s.frames.iter().filter(|f| f.n_cells >= 8) {
            let c = Vec3::from_array(f.center_um);
            let time = run.frames[f.frame].meta.time_us;
            if let Some(b) = detections[f.frame].iter().find(|b| (b.centroid - c).norm() < cfg.spacing_um) {
                ids.push(owner[&(time.to_bits(), b.id)]);
            }
        }
        if ids.len() < 2 {
            continue;
        }
        total += 1;
        if ids.iter().all(|&i| i == ids[0]) {
            recovered += 1;
        }
    }
    (recovered, total)
}

#[test]
fn surrogate_trajectories_are_recovered() {
    let (mut rec, mut tot) = (0, 0);
    for seed in 1..11 {
        let (r, t) = surrogate_recovery(seed);
        rec += r;
        tot += t;
    }
    assert!(tot >= 30, "too few droplets: {tot}");
    println!("recovered {rec}/{tot}");
    assert!(rec as f64 >= 0.99 * tot as f64, "{rec}/{tot}");
}
