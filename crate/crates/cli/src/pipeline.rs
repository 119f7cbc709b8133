//! Stage composition: bundles in, per-frame blobs, trajectories and
//! melt-pool samples out.

use std::path::{Path, PathBuf};

use log::info;
use spatter_core::dataset::{assemble, Dataset, FrameSamples};
use spatter_core::fieldstore::{load_bundle, FieldBundle};
use spatter_core::mpsample::{meltpool_mask, sample_surface, surface_cells, MeltPoolSample};
use spatter_core::segment::{segment, Labeling, SegmentParams, SegmentationResult};
use spatter_core::track::{TrackState, Tracker, TrackerConfig};
use spatter_core::{Blob, Error, Result};

/// Seed of the melt-pool draw for one frame.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn load(path: &Path) -> Result<FieldBundle> {
    load_bundle(path).map_err(|e| e.context(format!("bundle {}", path.display())))
}

pub fn segment_bundle(bundle: &FieldBundle, params: &SegmentParams) -> Result<(Labeling, SegmentationResult<f64>)> {
    segment::<f64>(bundle, params)
}

#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub path: PathBuf,
    pub time_us: f64,
    /// Spatter blobs opening a trajectory in this frame.
    pub new_spatter: Vec<Blob>,
    pub meltpool: Vec<MeltPoolSample<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunAnalysis {
    pub frames: Vec<FrameRecord>,
    pub tracks: TrackState<f64>,
}

/// Draws `count` melt-pool surface samples from one frame.
pub fn meltpool_samples(
    bundle: &FieldBundle,
    seg: &SegmentationResult<f64>,
    n_r: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<MeltPoolSample<f64>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mp = meltpool_mask(bundle, Some(&seg.composite))?;
    let surface = surface_cells(&mp, bundle);
    sample_surface(bundle, &mp, &surface, n_r, count, seed)
}

/// Segments and tracks the bundles in order, pairing each newly born
/// spatter blob with one melt-pool sample from the same frame. Bundles are
/// loaded one at a time.
pub fn analyze_run(
    paths: &[PathBuf],
    seg: &SegmentParams,
    tracker: &TrackerConfig,
    n_r: usize,
    seed: u64,
) -> Result<RunAnalysis> {
    if paths.is_empty() {
        return Err(Error::Empty("no bundle directories given".into()));
    }
    let mut t = Tracker::new(*tracker)?;
    let mut frames = Vec::with_capacity(paths.len());
    for (f, path) in paths.iter().enumerate() {
        let bundle = load(path)?;
        let (_, result) = segment_bundle(&bundle, seg).map_err(|e| e.context(format!("segment {}", path.display())))?;
        let blobs = result.spatter.clone();
        let time = bundle.meta.time_us;
        let born = t.push_frame(time, blobs).map_err(|e| e.context(format!("track {}", path.display())))?.born.clone();
        let new_spatter: Vec<Blob> = born.iter().map(|&j| result.spatter[j].clone()).collect();
        let meltpool = meltpool_samples(&bundle, &result, n_r, new_spatter.len(), frame_seed(seed, f))
            .map_err(|e| e.context(format!("sample {}", path.display())))?;
        info!("{}: {} spatter blob(s), {} new", path.display(), result.spatter.len(), new_spatter.len());
        frames.push(FrameRecord { path: path.clone(), time_us: time, new_spatter, meltpool });
    }
    Ok(RunAnalysis { frames, tracks: t.finish() })
}

pub fn run_dataset(run_id: &str, seed: u64, analysis: &RunAnalysis) -> Result<Dataset> {
    let frames: Vec<FrameSamples> = analysis
        .frames
        .iter()
        .enumerate()
        .map(|(f, r)| FrameSamples {
            run_id: run_id.to_string(),
            seed: Some(seed),
            frame: f,
            new_spatter: r.new_spatter.clone(),
            meltpool: r.meltpool.clone(),
        })
        .collect();
    assemble(&frames)
}
