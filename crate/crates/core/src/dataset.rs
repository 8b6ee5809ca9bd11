//! Procedural scenes, simulated LiDAR scans, scan pairs and KITTI pair assembly.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::{self, PointCloud, RigidTransform, Vector3};
use crate::{Error, Result};

/// Surface type of a scene point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Structure {
    Ground,
    Wall,
    Pole,
    Clutter,
}

/// A world-frame point cloud with per-point structure labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: Vec<Structure>,
}

/// Procedural scene parameters; densities are points per square metre of surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// The world spans `[-half_size, half_size]²` in the plane.
    pub half_size: f64,
    pub ground_density: f64,
    pub ground_noise: f64,
    pub walls: usize,
    pub wall_length: [f64; 2],
    pub wall_height: [f64; 2],
    pub wall_density: f64,
    pub poles: usize,
    pub pole_radius: [f64; 2],
    pub pole_height: [f64; 2],
    pub pole_density: f64,
    pub clutter: usize,
    pub clutter_radius: [f64; 2],
    pub clutter_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            half_size: 50.0,
            ground_density: 3.0,
            ground_noise: 0.03,
            walls: 45,
            wall_length: [4.0, 16.0],
            wall_height: [1.5, 5.0],
            wall_density: 6.0,
            poles: 70,
            pole_radius: [0.1, 0.4],
            pole_height: [2.0, 6.0],
            pole_density: 25.0,
            clutter: 60,
            clutter_radius: [0.4, 1.5],
            clutter_points: 120,
        }
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn mean(r: [f64; 2]) -> f64 {
    0.5 * (r[0] + r[1])
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.wall_length, self.wall_height, self.pole_radius, self.pole_height, self.clutter_radius];
        if !(self.half_size > 0.0) || ranges.iter().any(|r| !(r[0] >= 0.0 && r[1] >= r[0])) {
            return Err(Error::Config("scene sizes must be positive with ordered ranges".into()));
        }
        let dens = [self.ground_density, self.wall_density, self.pole_density, self.ground_noise];
        if dens.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config("scene densities must be non-negative".into()));
        }
        Ok(())
    }

    /// Expected point count implied by the densities.
    pub fn expected_points(&self) -> f64 {
        let side = 2.0 * self.half_size;
        let ground = (side * side * self.ground_density).round();
        let walls = self.walls as f64 * mean(self.wall_length) * mean(self.wall_height) * self.wall_density;
        let poles = self.poles as f64 * 2.0 * PI * mean(self.pole_radius) * mean(self.pole_height) * self.pole_density;
        ground + walls + poles + (self.clutter * self.clutter_points) as f64
    }
}

/// Ground with height noise, axis-aligned walls, vertical poles and clutter blobs; a pure function of `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.half_size;
    let noise = Normal::new(0.0, cfg.ground_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    let mut push = |p: Vector3<f64>, s: Structure, pts: &mut Vec<Vector3<f64>>| {
        pts.push(p);
        labels.push(s);
    };
    let n_ground = (4.0 * h * h * cfg.ground_density).round() as usize;
    for _ in 0..n_ground {
        let (x, y) = (rng.random_range(-h..h), rng.random_range(-h..h));
        let z = noise.sample(&mut rng);
        push(Vector3::new(x, y, z), Structure::Ground, &mut pts);
    }
    for _ in 0..cfg.walls {
        let (cx, cy) = (rng.random_range(-h..h), rng.random_range(-h..h));
        let along_x = rng.random_bool(0.5);
        let len = uniform(&mut rng, cfg.wall_length);
        let height = uniform(&mut rng, cfg.wall_height);
        let n = (len * height * cfg.wall_density).round() as usize;
        for _ in 0..n {
            let s = rng.random_range(-0.5..0.5) * len;
            let z = rng.random_range(0.0..1.0) * height;
            let p = if along_x { Vector3::new(cx + s, cy, z) } else { Vector3::new(cx, cy + s, z) };
            push(p, Structure::Wall, &mut pts);
        }
    }
    for _ in 0..cfg.poles {
        let (cx, cy) = (rng.random_range(-h..h), rng.random_range(-h..h));
        let r = uniform(&mut rng, cfg.pole_radius);
        let height = uniform(&mut rng, cfg.pole_height);
        let n = (2.0 * PI * r * height * cfg.pole_density).round() as usize;
        for _ in 0..n {
            let a = rng.random_range(0.0..2.0 * PI);
            let z = rng.random_range(0.0..1.0) * height;
            push(Vector3::new(cx + r * a.cos(), cy + r * a.sin(), z), Structure::Pole, &mut pts);
        }
    }
    for _ in 0..cfg.clutter {
        let (cx, cy) = (rng.random_range(-h..h), rng.random_range(-h..h));
        let r = uniform(&mut rng, cfg.clutter_radius);
        let c = Vector3::new(cx, cy, r);
        for _ in 0..cfg.clutter_points {
            // rejection sample the unit ball
            let v = loop {
                let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if v.norm_squared() <= 1.0 {
                    break v;
                }
            };
            push(c + v * r, Structure::Clutter, &mut pts);
        }
    }
    Ok(Scene {
        cloud: PointCloud::new(pts)?,
        labels,
    })
}

/// Rotating-LiDAR model: an azimuth × elevation ray grid mounted at `height` above the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub height: f64,
    pub range: f64,
    pub min_range: f64,
    pub azimuth_step_deg: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub beams: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            height: 1.7,
            range: 30.0,
            min_range: 1.0,
            azimuth_step_deg: 0.5,
            elevation_min_deg: -25.0,
            elevation_max_deg: 3.0,
            beams: 32,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > self.min_range && self.min_range >= 0.0) || !(self.azimuth_step_deg > 0.0) {
            return Err(Error::Config("sensor needs range > min_range >= 0 and a positive azimuth step".into()));
        }
        if self.beams < 2 || !(self.elevation_max_deg > self.elevation_min_deg) {
            return Err(Error::Config("sensor needs >= 2 beams over an increasing elevation span".into()));
        }
        Ok(())
    }

    fn elevation_step(&self) -> f64 {
        (self.elevation_max_deg - self.elevation_min_deg).to_radians() / (self.beams - 1) as f64
    }

    fn azimuth_bins(&self) -> usize {
        (360.0 / self.azimuth_step_deg).round().max(1.0) as usize
    }
}

/// Ray index of a sensor-frame point, or `None` if it misses every beam or is out of range.
fn ray_of(v: &Vector3<f64>, s: &SensorConfig) -> Option<(usize, f64)> {
    let r = v.norm();
    if r > s.range || r < s.min_range {
        return None;
    }
    let el = v.z.atan2(v.x.hypot(v.y));
    let step = s.elevation_step();
    let b = ((el - s.elevation_min_deg.to_radians()) / step).round();
    if b < 0.0 || b >= s.beams as f64 {
        return None;
    }
    let n_az = s.azimuth_bins();
    let a = ((v.y.atan2(v.x) + PI) / (2.0 * PI) * n_az as f64).floor() as usize % n_az;
    Some((b as usize * n_az + a, r))
}

/// Nearest hit per ray, returned in the sensor frame ordered by ray index.
/// `pose` maps sensor coordinates into the world.
pub fn simulate_scan(scene: &Scene, pose: &RigidTransform, sensor: &SensorConfig) -> PointCloud {
    let inv = pose.inverse();
    let mut best: std::collections::BTreeMap<usize, (f64, Vector3<f64>)> = Default::default();
    for p in scene.cloud.points() {
        let v = inv.apply(p);
        let Some((ray, r)) = ray_of(&v, sensor) else { continue };
        let e = best.entry(ray).or_insert((f64::INFINITY, v));
        let closer = r < e.0 || (r == e.0 && [v.x, v.y, v.z] < [e.1.x, e.1.y, e.1.z]);
        if closer {
            *e = (r, v);
        }
    }
    PointCloud::new(best.into_values().map(|(_, v)| v).collect()).expect("finite scene points")
}

/// Sensor pose at planar position `(x, y)` with heading `yaw`.
pub fn sensor_pose(x: f64, y: f64, yaw: f64, sensor: &SensorConfig) -> RigidTransform {
    RigidTransform::from_yaw(yaw, Vector3::new(x, y, sensor.height))
}

/// Two scans with the transform mapping Q's sensor frame into P's.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPair {
    pub p: PointCloud,
    pub q: PointCloud,
    pub gt: RigidTransform,
    pub distance: f64,
}

/// Pose placement for synthetic pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    /// Maximum relative heading between the two poses, in degrees.
    pub yaw_spread_deg: f64,
    /// Minimum distance of every pose from the world border.
    pub margin: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            yaw_spread_deg: 15.0,
            margin: 10.0,
        }
    }
}

/// Poses of a pair at planar `distance` with random position, heading and direction.
pub fn pair_poses(
    scene_cfg: &SceneConfig,
    distance: f64,
    seed: u64,
    pair: &PairConfig,
    sensor: &SensorConfig,
) -> Result<(RigidTransform, RigidTransform)> {
    let lim = scene_cfg.half_size - pair.margin;
    if !(distance >= 0.0) || !(lim > 0.0) || distance > 2.0 * std::f64::consts::SQRT_2 * lim {
        return Err(Error::Extent(format!("distance {distance} does not fit a {lim} m placement box")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = rng.random_range(-PI..PI);
    let spread = pair.yaw_spread_deg.to_radians();
    let dyaw = if spread > 0.0 { rng.random_range(-spread..spread) } else { 0.0 };
    for _ in 0..1000 {
        let (x, y) = (rng.random_range(-lim..=lim), rng.random_range(-lim..=lim));
        let dir = rng.random_range(-PI..PI);
        let (qx, qy) = (x + distance * dir.cos(), y + distance * dir.sin());
        if qx.abs() <= lim && qy.abs() <= lim {
            return Ok((sensor_pose(x, y, yaw, sensor), sensor_pose(qx, qy, yaw + dyaw, sensor)));
        }
    }
    Err(Error::Extent(format!("could not place two poses {distance} m apart")))
}

/// Simulates both scans of a pair; `gt = pose_p⁻¹ ∘ pose_q`.
pub fn make_pair(
    scene: &Scene,
    scene_cfg: &SceneConfig,
    distance: f64,
    seed: u64,
    pair: &PairConfig,
    sensor: &SensorConfig,
) -> Result<ScanPair> {
    let (pp, pq) = pair_poses(scene_cfg, distance, seed, pair, sensor)?;
    Ok(ScanPair {
        p: simulate_scan(scene, &pp, sensor),
        q: simulate_scan(scene, &pq, sensor),
        gt: pp.inverse().compose(&pq),
        distance,
    })
}

/// Half-open distance bucket `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
}

impl Bucket {
    pub fn contains(&self, d: f64) -> bool {
        d > self.lo && d <= self.hi
    }
}

/// Index pairs `(i, j)`, `i < j`, whose pose translations are a bucket distance apart, with `gt = pose_i⁻¹ ∘ pose_j`.
pub fn kitti_pair_indices(poses: &[RigidTransform], bucket: Bucket) -> Vec<(usize, usize, RigidTransform, f64)> {
    let mut out = Vec::new();
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            let d = (poses[i].translation() - poses[j].translation()).norm();
            if bucket.contains(d) {
                out.push((i, j, poses[i].inverse().compose(&poses[j]), d));
            }
        }
    }
    out
}

/// `.bin` scans of a sequence directory in file-name order.
pub fn sequence_scans(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every pair of a KITTI-layout sequence falling in `bucket`.
pub fn kitti_pairs(dir: impl AsRef<Path>, poses_file: impl AsRef<Path>, bucket: Bucket) -> Result<Vec<ScanPair>> {
    let scans = sequence_scans(dir)?;
    let poses = bev::load_poses(poses_file)?;
    if scans.len() != poses.len() {
        return Err(Error::Format(format!("{} scans but {} poses", scans.len(), poses.len())));
    }
    kitti_pair_indices(&poses, bucket)
        .into_iter()
        .map(|(i, j, gt, distance)| {
            Ok(ScanPair {
                p: bev::load_kitti_bin(&scans[i])?,
                q: bev::load_kitti_bin(&scans[j])?,
                gt,
                distance,
            })
        })
        .collect()
}

/// Loop-closure corpus layout: `laps` traversals of a circle, `frames_per_lap` frames each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub frames_per_lap: usize,
    pub laps: usize,
    pub radius: f64,
    /// Maximum planar offset of a revisit from the first traversal.
    pub revisit_offset: f64,
    pub yaw_jitter_deg: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            frames_per_lap: 30,
            laps: 2,
            radius: 60.0,
            revisit_offset: 2.0,
            yaw_jitter_deg: 5.0,
        }
    }
}

/// Scans and world poses along a repeated loop.
#[derive(Debug, Clone)]
pub struct LoopCorpus {
    pub frames: Vec<PointCloud>,
    pub poses: Vec<RigidTransform>,
}

/// Frame `lap·n + k` sits at angle `2πk/n` on the circle, facing along the tangent,
/// displaced by at most `revisit_offset` on later laps.
pub fn loop_poses(cfg: &LoopConfig, seed: u64, sensor: &SensorConfig) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = cfg.yaw_jitter_deg.to_radians();
    let mut poses = Vec::with_capacity(cfg.laps * cfg.frames_per_lap);
    for lap in 0..cfg.laps {
        for k in 0..cfg.frames_per_lap {
            let a = 2.0 * PI * k as f64 / cfg.frames_per_lap as f64;
            let (mut x, mut y) = (cfg.radius * a.cos(), cfg.radius * a.sin());
            if lap > 0 {
                let (r, d) = (rng.random_range(0.0..=cfg.revisit_offset), rng.random_range(-PI..PI));
                x += r * d.cos();
                y += r * d.sin();
            }
            let yaw = a + PI / 2.0 + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            poses.push(sensor_pose(x, y, yaw, sensor));
        }
    }
    poses
}

pub fn loop_corpus(scene: &Scene, cfg: &LoopConfig, seed: u64, sensor: &SensorConfig) -> LoopCorpus {
    let poses = loop_poses(cfg, seed, sensor);
    LoopCorpus {
        frames: poses.iter().map(|p| simulate_scan(scene, p, sensor)).collect(),
        poses,
    }
}
