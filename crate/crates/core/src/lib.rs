//! Deterministic stereo geometry pipeline for 3D object detection.
//!
//! The crate implements the full dataflow of an efficient stereo detector
//! at desk scale: paired feature pyramids are correlated into cost volumes,
//! lifted to channelled stereo volumes, resampled onto a metric voxel grid,
//! flattened to bird's-eye-view maps, and fused into geometry-aware
//! features. A LiDAR teacher path (voxelization, BEV pooling, fusion)
//! provides targets for a masked distillation loss, and a SECOND-style
//! anchor head supplies box encoding, losses, and decoding for
//! KITTI-protocol AP evaluation.
//!
//! Every trained network is replaced by seeded fixture kernels, so all
//! transforms are pure functions of their inputs and a seed: identical
//! configurations produce bit-identical results across runs and thread
//! counts.

pub mod bev;
pub mod cli;
pub mod detect;
pub mod distill;
pub mod error;
pub mod eval;
pub mod iou;
pub mod kitti;
pub mod ops;
pub mod stereo;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
