use nalgebra::Vector3;

use crate::error::{Error, Result};

use super::RigidTransform;

/// Ordered list of 3D points in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if let Some(idx) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Format(format!("point {idx} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_xyz(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect())
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `p' = R p + t` for every point, order preserved.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }

    /// Concatenates two clouds, `self` first.
    pub fn merged(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    pub fn into_points(self) -> Vec<Vector3<f64>> {
        self.points
    }
}

/// Applies a rigid transform to every point of `cloud`.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    cloud.transformed(t)
}
