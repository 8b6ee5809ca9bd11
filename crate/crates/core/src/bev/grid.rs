use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::PointCloud;

/// Axis-aligned metric bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    pub fn centered(half_x: f64, half_y: f64, zmin: f64, zmax: f64) -> Self {
        Self {
            min: [-half_x, -half_y, zmin],
            max: [half_x, half_y, zmax],
        }
    }

    pub fn size(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Cell counts along x (rows), y (columns) and z (channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub layers: usize,
}

/// Geometry of the BEV discretization plus the saliency window size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevConfig {
    pub extent: Extent,
    pub shape: GridShape,
    /// Odd side length (cells) of the saliency neighborhood.
    pub window: usize,
}

impl BevConfig {
    pub fn new(extent: Extent, shape: GridShape, window: usize) -> Result<Self> {
        let cfg = Self {
            extent,
            shape,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.extent.max[a] > self.extent.min[a]) {
                return Err(Error::Config(format!("extent axis {a}: max must exceed min")));
            }
        }
        if self.shape.rows == 0 || self.shape.cols == 0 || self.shape.layers == 0 {
            return Err(Error::Config("grid shape entries must be >= 1".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [
            self.extent.size(0) / self.shape.rows as f64,
            self.extent.size(1) / self.shape.cols as f64,
            self.extent.size(2) / self.shape.layers as f64,
        ]
    }

    /// Planar cell edge used for radii; the larger of the x/y edges.
    pub fn planar_cell(&self) -> f64 {
        let c = self.cell_size();
        c[0].max(c[1])
    }

    /// Cell index along `axis`, or `None` outside the extent.
    /// Interior boundaries go to the higher cell; the upper face clamps to the last cell.
    pub fn bin(&self, axis: usize, v: f64) -> Option<usize> {
        let (lo, hi) = (self.extent.min[axis], self.extent.max[axis]);
        if !(v >= lo && v <= hi) {
            return None;
        }
        let n = match axis {
            0 => self.shape.rows,
            1 => self.shape.cols,
            _ => self.shape.layers,
        };
        let idx = ((v - lo) / (hi - lo) * n as f64).floor() as usize;
        Some(idx.min(n - 1))
    }

    /// Metric center of cell `(i, j)` at a coarsening `stride` (1 = fine grid).
    pub fn cell_center(&self, i: usize, j: usize, stride: usize) -> [f64; 2] {
        let c = self.cell_size();
        let s = stride as f64;
        [
            self.extent.min[0] + (i as f64 + 0.5) * c[0] * s,
            self.extent.min[1] + (j as f64 + 0.5) * c[1] * s,
        ]
    }

    pub fn layer_center(&self, k: usize) -> f64 {
        self.extent.min[2] + (k as f64 + 0.5) * self.cell_size()[2]
    }
}

/// Dense binary occupancy over `rows × cols × layers` plus the pillar mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    config: BevConfig,
    occupancy: Vec<u8>,
    pillars: Vec<u8>,
    dropped: usize,
}

impl BevGrid {
    /// Uniform binning of every in-extent point; out-of-extent points are counted and dropped.
    pub fn voxelize(cloud: &PointCloud, config: &BevConfig) -> BevGrid {
        let GridShape { rows, cols, layers } = config.shape;
        let mut occupancy = vec![0u8; rows * cols * layers];
        let mut dropped = 0;
        for p in cloud.points() {
            match (config.bin(0, p.x), config.bin(1, p.y), config.bin(2, p.z)) {
                (Some(i), Some(j), Some(k)) => occupancy[(i * cols + j) * layers + k] = 1,
                _ => dropped += 1,
            }
        }
        let pillars = occupancy
            .chunks(layers)
            .map(|c| c.iter().copied().max().unwrap_or(0))
            .collect();
        BevGrid {
            config: *config,
            occupancy,
            pillars,
            dropped,
        }
    }

    pub fn config(&self) -> &BevConfig {
        &self.config
    }

    pub fn shape(&self) -> GridShape {
        self.config.shape
    }

    /// Number of input points that fell outside the extent.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn occupied(&self, i: usize, j: usize, k: usize) -> bool {
        let s = self.config.shape;
        self.occupancy[(i * s.cols + j) * s.layers + k] == 1
    }

    /// `B*[i, j]`.
    pub fn pillar_occupied(&self, i: usize, j: usize) -> bool {
        self.pillars[i * self.config.shape.cols + j] == 1
    }

    pub fn pillar_channels(&self, i: usize, j: usize) -> &[u8] {
        let s = self.config.shape;
        let start = (i * s.cols + j) * s.layers;
        &self.occupancy[start..start + s.layers]
    }

    pub fn pillar_mask(&self) -> &[u8] {
        &self.pillars
    }

    /// Occupied pillars in lexicographic `(i, j)` order.
    pub fn occupied_pillars(&self) -> Vec<(usize, usize)> {
        let cols = self.config.shape.cols;
        self.pillars
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(idx, _)| (idx / cols, idx % cols))
            .collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v == 1).count()
    }

    /// `(channel, center height)` of each occupied voxel in the pillar, ascending channel.
    pub fn pillar_heights(&self, i: usize, j: usize) -> Vec<(usize, f64)> {
        self.pillar_channels(i, j)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(k, _)| (k, self.config.layer_center(k)))
            .collect()
    }
}

pub fn voxelize(cloud: &PointCloud, config: &BevConfig) -> BevGrid {
    BevGrid::voxelize(cloud, config)
}
