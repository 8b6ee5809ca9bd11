//! Unified bird's-eye-view model for LiDAR local features and overlap estimation.
//!
//! Point clouds are binned into multi-layer BEV occupancy grids, run through a
//! sparse 2D UNet, and decoded into per-cell descriptors, keypoint scores,
//! regressed heights and cross-attended overlap maps. Descriptors drive
//! RANSAC registration; the overlap maps yield a similarity score used for
//! loop-closure retrieval.

pub mod bev;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod error;
pub mod heads;
pub mod losses;
pub mod model;
pub mod registration;
pub mod verify;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
