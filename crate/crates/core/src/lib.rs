//! Spatter analysis for voxelized laser powder bed fusion melt-pool fields.
//!
//! The pipeline runs: load or synthesize [`fieldstore::FieldBundle`]s,
//! segment metal components ([`segment`]), link spatter across frames
//! ([`track`]), sample the melt-pool surface ([`mpsample`]), assemble and
//! split balanced datasets ([`dataset`]), train and tune classifiers
//! ([`learners`]), explain them ([`explain`]) and screen power/velocity
//! grids into a spatter-volume process map ([`procmap`]) using the
//! calibrated surrogate in [`synthgen`].
//!
//! Numeric kernels are generic over the scalar type; the aliases below fix
//! it to `f64`.

pub mod dataset;
pub mod error;
pub mod explain;
pub mod fieldstore;
pub mod geom;
pub mod io_util;
pub mod kdtree;
pub mod learners;
pub mod metrics;
pub mod mpsample;
pub mod num;
pub mod procmap;
pub mod segment;
pub mod synthgen;
pub mod track;
pub mod unionfind;

pub use error::{Error, Result};

pub type Vec3d = geom::Vec3<f64>;
pub type Blob = segment::Blob<f64>;
pub type SegmentationResult = segment::SegmentationResult<f64>;
pub type Trajectory = track::Trajectory<f64>;
pub type Tracker = track::Tracker<f64>;
pub type MeltPoolSample = mpsample::MeltPoolSample<f64>;
pub type Attribution = explain::Attribution<f64>;
