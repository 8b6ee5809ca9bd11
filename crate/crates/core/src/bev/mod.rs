//! Point-cloud ingestion, rigid motions and BEV occupancy grids.

mod cloud;
mod grid;
pub mod io;
mod transform;

pub use cloud::{apply_transform, PointCloud};
pub use grid::{voxelize, BevConfig, BevGrid, Extent, GridShape};
pub use io::{load_kitti_bin, load_poses, save_kitti_bin, save_poses};
pub use transform::RigidTransform;

pub use nalgebra::{Matrix3, Vector3};
