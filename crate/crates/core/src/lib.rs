//! Multi-level neural cellular automaton (NCA) segmentation.
//!
//! A backbone NCA repeatedly applies a small learned rule (depthwise 3^d
//! perception, two linear layers with a ReLU) to every cell of a dense grid.
//! The octree variant runs one NCA per resolution level: the coarsest level
//! spreads global context in a few steps, then the hidden channels are
//! nearest-upsampled and refined level by level until the full-resolution
//! mask is produced.
//!
//! Two inference engines are provided:
//!
//! * [`reference`]: layer-wise, materialises whole-grid intermediates and
//!   records a tape for backpropagation. This is the ground truth.
//! * [`fused`]: cell-oriented, computes a whole step per cell with a
//!   constant-size per-worker scratch and only two state buffers alive.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise.

pub mod bench;
pub mod error;
pub mod fused;
pub mod grid;
pub mod io;
pub mod memory;
pub mod model;
pub mod octree;
pub mod par;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use fused::FusedEngine;
pub use grid::{AxisFactors, CellGrid, GridShape};
pub use memory::{MemoryReport, MemoryTracker};
pub use model::{ModelConfig, NcaWeights, OctreeModel};
pub use octree::{build_schedule, segment, EngineKind, PyramidSchedule, SegmentationResult};
pub use rng::FireDecision;
pub use scalar::Real;
