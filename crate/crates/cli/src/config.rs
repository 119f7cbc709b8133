//! JSON pipeline configuration. Every section is optional and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatter_core::dataset::KdeBandwidth;
use spatter_core::fieldstore::GridMeta;
use spatter_core::learners::search::Grid;
use spatter_core::learners::{Algorithm, HyperParams, ModelSpec, Scaling};
use spatter_core::procmap::{Axis, BoundaryOverlay, ScreenConfig, ScreenGrid};
use spatter_core::segment::SegmentParams;
use spatter_core::synthgen::{ClassModel, MaterialParams, ProcessParams, SurrogateConfig};
use spatter_core::track::TrackerConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub segment: SegmentParams,
    pub tracker: TrackerConfig,
    pub sampling: SamplingConfig,
    pub dataset: DatasetConfig,
    pub learner: LearnerConfig,
    pub explain: ExplainConfig,
    pub synth: SynthConfig,
    pub screen: ScreenSection,
    pub map: MapConfig,
}

/// Input locations. Anything left unset is read from the output directory,
/// where the previous stage wrote it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Time-ordered bundle directories of one run.
    pub bundles: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub screen_cells: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub points_csv: Option<PathBuf>,
    pub grid: Option<GridMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Odd cube edge in cells.
    pub n_r: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { n_r: spatter_core::mpsample::DEFAULT_CUBE_EDGE, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Segment, track and sample the configured bundles.
    #[default]
    Bundles,
    /// Draw from the class-conditional generator.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub run_id: String,
    /// Record count for the synthetic source (even).
    pub n_records: usize,
    pub class_model: ClassModel,
    pub train_frac: f64,
    pub seed: u64,
    pub drop_spatial: bool,
    pub stats_bins: usize,
    pub kde_bandwidth: KdeBandwidth,
    pub pairs_max: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Bundles,
            run_id: "run".into(),
            n_records: 488,
            class_model: ClassModel::default(),
            train_frac: 0.7,
            seed: 0,
            drop_spatial: false,
            stats_bins: 30,
            kde_bandwidth: KdeBandwidth::default(),
            pairs_max: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSetting {
    /// Fit the base hyperparameters directly.
    None,
    /// The published search space for the algorithm.
    #[default]
    Table2,
    Custom(Grid),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    /// Base hyperparameters; grid values override them.
    pub hyperparameters: HyperParams,
    pub scaling: Scaling,
    pub grid: GridSetting,
    pub folds: usize,
    pub seed: u64,
    pub threshold: f64,
    pub permutation_repeats: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Forest,
            hyperparameters: HyperParams::new(),
            scaling: Scaling::None,
            grid: GridSetting::Table2,
            folds: 5,
            seed: 0,
            threshold: 0.5,
            permutation_repeats: 5,
        }
    }
}

impl LearnerConfig {
    /// Base spec and grid to search. For the published grid, base
    /// hyperparameters from the config are laid over the published base.
    pub fn search_space(&self) -> spatter_core::Result<(ModelSpec, Option<Grid>)> {
        let (mut base, grid) = match &self.grid {
            GridSetting::None => (ModelSpec::new(self.algorithm), None),
            GridSetting::Table2 => {
                let (b, g) = spatter_core::learners::search::table2_grid(self.algorithm)?;
                (b, Some(g))
            }
            GridSetting::Custom(g) => (ModelSpec::new(self.algorithm), Some(g.clone())),
        };
        base.hyperparameters.extend(self.hyperparameters.clone());
        base.seed = self.seed;
        base.scaling = self.scaling;
        Ok((base, grid))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Background rows drawn from the training set.
    pub background: usize,
    /// Records explained from the test set; all when unset.
    pub max_records: Option<usize>,
    pub max_features: usize,
    pub pdp_points: usize,
    /// Features with a PDP curve; all when unset.
    pub pdp_features: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            background: spatter_core::explain::DEFAULT_BACKGROUND,
            max_records: None,
            max_features: spatter_core::explain::DEFAULT_MAX_FEATURES,
            pdp_points: spatter_core::explain::DEFAULT_PDP_POINTS,
            pdp_features: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub process: ProcessParams,
    pub material: MaterialParams,
    pub surrogate: SurrogateConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            process: ProcessParams::new(300.0, 1.0),
            material: MaterialParams::default(),
            surrogate: SurrogateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreenSection {
    pub grid: ScreenGrid,
    pub config: ScreenConfig,
}

impl Default for ScreenSection {
    fn default() -> Self {
        let base = ProcessParams::new(1.0, 1.0);
        Self {
            grid: ScreenGrid {
                power_w: Axis::Linspace { start: 150.0, stop: 550.0, n: 8 },
                scan_speed_m_s: Axis::Linspace { start: 0.4, stop: 2.2, n: 8 },
                beam_radius_um: base.beam_radius_um,
                absorptivity: base.absorptivity,
            },
            config: ScreenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub overlay: BoundaryOverlay,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Replaces every stage seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.sampling.seed = seed;
        self.dataset.seed = seed;
        self.learner.seed = seed;
        self.explain.seed = seed;
        self.synth.surrogate.seed = seed;
        self.screen.config.seed = seed;
    }

    /// Checks every section; the first problem is reported as a config error.
    pub fn check(&self) -> Result<(), CliError> {
        let bad = |section: &str, e: spatter_core::Error| CliError::Config(format!("{section}: {e}"));
        if !(self.segment.threshold > 0.0 && self.segment.threshold < 1.0) {
            return Err(CliError::Config(format!("segment.threshold must lie in (0, 1), got {}", self.segment.threshold)));
        }
        self.tracker.check().map_err(|e| bad("tracker", e))?;
        if self.sampling.n_r % 2 == 0 {
            return Err(CliError::Config(format!("sampling.n_r must be odd and >= 1, got {}", self.sampling.n_r)));
        }
        let d = &self.dataset;
        if !(d.train_frac > 0.0 && d.train_frac < 1.0) {
            return Err(CliError::Config(format!("dataset.train_frac must lie in (0, 1), got {}", d.train_frac)));
        }
        if d.source == DatasetSource::Synthetic && (d.n_records == 0 || d.n_records % 2 != 0) {
            return Err(CliError::Config(format!("dataset.n_records must be even and > 0, got {}", d.n_records)));
        }
        if d.stats_bins == 0 {
            return Err(CliError::Config("dataset.stats_bins must be >= 1".into()));
        }
        let l = &self.learner;
        if l.folds < 2 {
            return Err(CliError::Config(format!("learner.folds must be >= 2, got {}", l.folds)));
        }
        if !(l.threshold > 0.0 && l.threshold < 1.0) {
            return Err(CliError::Config(format!("learner.threshold must lie in (0, 1), got {}", l.threshold)));
        }
        let (base, grid) = l.search_space().map_err(|e| bad("learner", e))?;
        match grid {
            Some(g) => {
                for point in spatter_core::learners::search::enumerate_grid(&g).map_err(|e| bad("learner.grid", e))? {
                    let mut s = base.clone();
                    s.hyperparameters.extend(point);
                    s.validate().map_err(|e| bad("learner.grid", e))?;
                }
            }
            None => {
                base.validate().map_err(|e| bad("learner.hyperparameters", e))?;
            }
        }
        if self.explain.background == 0 {
            return Err(CliError::Config("explain.background must be >= 1".into()));
        }
        self.synth.process.check().map_err(|e| bad("synth.process", e))?;
        self.synth.material.check().map_err(|e| bad("synth.material", e))?;
        self.synth.surrogate.check().map_err(|e| bad("synth.surrogate", e))?;
        self.screen.config.surrogate.check().map_err(|e| bad("screen.config.surrogate", e))?;
        let t = self.screen.config.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::Config(format!("screen.config.threshold must lie in (0, 1), got {t}")));
        }
        self.map.overlay.check().map_err(|e| bad("map.overlay", e))?;
        Ok(())
    }
}
