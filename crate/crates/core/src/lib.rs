//! Occupancy-head library: projection-aware deformable attention over a
//! synthetic multi-camera rig, a density-aware coarse-to-fine voxel decoder,
//! the four-term training objective, analytic FLOP accounting, and a small
//! deterministic training harness.
//!
//! All numeric modules are generic over [`scalar::Scalar`] (f32 or f64);
//! concrete aliases live at the crate root. f64 is the verification mode
//! (gradient checks, oracles), f32 the training mode.

pub mod config;
pub mod decoder;
pub mod diffcore;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod io;
pub mod objective;
pub mod pada;
pub mod params;
pub mod scalar;
pub mod train;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 (verification-mode) aliases.
pub type Grid64 = diffcore::DenseGrid<f64>;
pub type Graph64 = diffcore::Graph<f64>;
pub type Camera64 = geometry::CameraModel<f64>;

/// f32 (training-mode) aliases.
pub type Grid32 = diffcore::DenseGrid<f32>;
pub type Graph32 = diffcore::Graph<f32>;
pub type Camera32 = geometry::CameraModel<f32>;
