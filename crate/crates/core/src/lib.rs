//! Scene-oriented prompt pools for a pillar-based sparse-voxel transformer.
//!
//! The crate covers the whole desk-scale pipeline: synthetic LiDAR scenes,
//! pillar voxelization, windowed X/Y set partitioning, three prompt
//! mechanisms (static tokens, a per-set generator and a key/value prompt
//! pool), a transformer backbone with a per-cell detection head, and the
//! fine-tuning harness that freezes, wraps and counts parameters for every
//! tuning mode.

pub mod backbone;
pub mod error;
pub mod numkernel;
pub mod par;
pub mod params;
pub mod partition;
pub mod pointcloud;
pub mod prompts;
pub mod tuner;

pub use error::{Error, Result};
