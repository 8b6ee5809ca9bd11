//! Training steps and the inference/registration pipeline built on the model.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{BevGrid, PointCloud, RigidTransform};
use crate::heads::{self, Keypoint, KeypointSource, OverlapFilter};
use crate::losses::{self, CorrespondenceSample, LossWeights, OverlapLabels, PlanarIndex, Radii, RegressionTargets, SampleIndex};
use crate::model::{grid_layout, CloudFeatures, Model, PairOutputs};
use crate::nn::sparse::SparseLayout;
use crate::nn::{Adam, CircleParams, Graph, Mat, ParamStore, Var};
use crate::registration::{self, RansacConfig, RegistrationResult};
use crate::{Error, Result};

/// Optimization and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub anchors: usize,
    pub negatives: usize,
    pub weights: LossWeights,
    pub circle: CircleParams,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 500,
            seed: 0,
            anchors: 128,
            negatives: 32,
            weights: LossWeights::default(),
            circle: CircleParams::default(),
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.circle.validate()?;
        if !(self.lr > 0.0) || self.anchors == 0 || self.negatives == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("lr, anchors, negatives and checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Planar cell centres with the mean occupied-voxel height as a fixed third coordinate.
pub fn cell_positions(layout: &SparseLayout, grid: &BevGrid, stride: usize) -> Vec<[f64; 3]> {
    let cfg = grid.config();
    let zc = 0.5 * (cfg.extent.min[2] + cfg.extent.max[2]);
    layout
        .coords()
        .iter()
        .map(|&(i, j)| {
            let [x, y] = cfg.cell_center(i as usize, j as usize, stride);
            let z = if stride == 1 {
                let hs = grid.pillar_heights(i as usize, j as usize);
                hs.iter().map(|h| h.1).sum::<f64>() / hs.len().max(1) as f64
            } else {
                zc
            };
            [x, y, z]
        })
        .collect()
}

/// Deep-level active set of a grid.
pub fn deep_layout(grid: &BevGrid, levels: usize) -> Result<SparseLayout> {
    let mut l = grid_layout(grid)?;
    for _ in 1..levels {
        l = l.coarsened()?;
    }
    Ok(l)
}

/// Geometry-only supervision of one training pair, computed once.
#[derive(Debug, Clone)]
pub struct PairData {
    pub grid_p: BevGrid,
    pub grid_q: BevGrid,
    pub gt: RigidTransform,
    pub distance: f64,
    pub fine_p: Vec<[f64; 3]>,
    pub fine_q: Vec<[f64; 3]>,
    pub deep_p: Vec<[f64; 3]>,
    pub deep_q: Vec<[f64; 3]>,
    pub labels: OverlapLabels,
    pub reg_p: RegressionTargets,
    pub reg_q: RegressionTargets,
}

impl PairData {
    pub fn new(model: &Model, p: &PointCloud, q: &PointCloud, gt: RigidTransform, distance: f64) -> Result<Self> {
        let bev = &model.bev;
        let (grid_p, grid_q) = (BevGrid::voxelize(p, bev), BevGrid::voxelize(q, bev));
        let (lp, lq) = (grid_layout(&grid_p)?, grid_layout(&grid_q)?);
        if lp.is_empty() || lq.is_empty() {
            return Err(Error::EmptyInput("pair has an empty grid"));
        }
        let levels = model.config.levels();
        let stride = model.config.deep_stride();
        let (dp, dq) = (deep_layout(&grid_p, levels)?, deep_layout(&grid_q, levels)?);
        let fine_p = cell_positions(&lp, &grid_p, 1);
        let fine_q = cell_positions(&lq, &grid_q, 1);
        let r = Radii::for_cell(bev.planar_cell()).positive;
        let raw_p = PlanarIndex::new(losses::points_in_extent(p, bev), bev.planar_cell());
        let raw_q = PlanarIndex::new(losses::points_in_extent(q, bev), bev.planar_cell());
        let reg_p = losses::regression_targets(&fine_p, &raw_p, &fine_q, &gt, r)?;
        let reg_q = losses::regression_targets(&fine_q, &raw_q, &fine_p, &gt.inverse(), r)?;
        let labels = losses::make_overlap_labels(bev, stride, &dp, &dq, p, q, &gt);
        Ok(Self {
            deep_p: cell_positions(&dp, &grid_p, stride),
            deep_q: cell_positions(&dq, &grid_q, stride),
            grid_p,
            grid_q,
            gt,
            distance,
            fine_p,
            fine_q,
            labels,
            reg_p,
            reg_q,
        })
    }
}

/// Values of every loss term of one step; absent terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTerms {
    pub terms: [Option<f64>; 5],
    pub total: f64,
}

impl StepTerms {
    /// `step,desc,det,reg,bce,sg,total`; absent terms print as `nan`.
    pub fn log_line(&self, step: u64) -> String {
        let mut s = format!("{step}");
        for t in self.terms {
            s.push_str(&format!(",{:.12e}", t.unwrap_or(f64::NAN)));
        }
        s.push_str(&format!(",{:.12e}", self.total));
        s
    }
}

/// Minimum deep feature norm for a cell to take part in the deep circle loss.
pub const DEEP_MIN_NORM: f64 = 1e-6;

fn both_ways(
    a: &[[f64; 3]],
    b: &[[f64; 3]],
    gt: &RigidTransform,
    anchors: usize,
    negatives: usize,
    radii: Radii,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Vec<CorrespondenceSample>, Vec<CorrespondenceSample>)>> {
    let ab = losses::sample_correspondences(a, b, gt, anchors, negatives, radii, rng);
    let ba = losses::sample_correspondences(b, a, &gt.inverse(), anchors, negatives, radii, rng);
    match (ab, ba) {
        (Ok(x), Ok(y)) => Ok(Some((x, y))),
        (Err(Error::NoOverlap), _) | (_, Err(Error::NoOverlap)) => Ok(None),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

fn half_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Records the forward pass and every loss term of one pair; returns the total.
pub fn pair_loss(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    data: &PairData,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, [Option<Var>; 5])> {
    let out: PairOutputs = model.forward_pair(g, store, &data.grid_p, &data.grid_q)?;
    let mut parts: [Option<Var>; 5] = [None; 5];
    let fine = Radii::for_cell(model.bev.planar_cell());
    if let Some((pq, qp)) = both_ways(&data.fine_p, &data.fine_q, &data.gt, cfg.anchors, cfg.negatives, fine, rng)? {
        let (ip, iq) = (SampleIndex::new(&pq)?, SampleIndex::new(&qp)?);
        let (dp, dq) = (out.p.descriptors.features, out.q.descriptors.features);
        let d_pq = ip.distances(g, dp, dq)?;
        let d_qp = iq.distances(g, dq, dp)?;
        let a = losses::circle_loss(g, d_pq, &ip, cfg.circle)?;
        let b = losses::circle_loss(g, d_qp, &iq, cfg.circle)?;
        parts[0] = Some(half_sum(g, a, b)?);
        let (sp, sq) = (out.p.saliency.score, out.q.saliency.score);
        let a = losses::detection_loss(g, d_pq, &ip, sp, sq)?;
        let b = losses::detection_loss(g, d_qp, &iq, sq, sp)?;
        parts[1] = Some(half_sum(g, a, b)?);
    }
    let (zp, zq) = (out.p.heights.z, out.q.heights.z);
    let a = losses::regression_loss_dir(g, zp, zq, &data.reg_p)?;
    let b = losses::regression_loss_dir(g, zq, zp, &data.reg_q)?;
    parts[2] = Some(half_sum(g, a, b)?);
    parts[3] = Some(losses::classification_bce(g, out.overlap_p.gamma, out.overlap_q.gamma, &data.labels)?);
    let deep_cell = model.bev.planar_cell() * model.config.deep_stride() as f64;
    let radii = Radii::for_cell(deep_cell);
    if let Some((pq, qp)) = both_ways(&data.deep_p, &data.deep_q, &data.gt, cfg.anchors, cfg.negatives, radii, rng)? {
        let np = losses::row_norms(g.value(out.p.deep.features));
        let nq = losses::row_norms(g.value(out.q.deep.features));
        let pq = losses::filter_degenerate(pq, &np, &nq, DEEP_MIN_NORM);
        let qp = losses::filter_degenerate(qp, &nq, &np, DEEP_MIN_NORM);
        if !pq.is_empty() && !qp.is_empty() {
            let a = losses::deep_circle_loss(g, &out.p.deep, &out.q.deep, &SampleIndex::new(&pq)?, cfg.circle)?;
            let b = losses::deep_circle_loss(g, &out.q.deep, &out.p.deep, &SampleIndex::new(&qp)?, cfg.circle)?;
            parts[4] = Some(half_sum(g, a, b)?);
        }
    }
    let named: Vec<(&str, Option<Var>)> = LossWeights::NAMES.iter().copied().zip(parts).collect();
    let total = losses::total_loss(g, &named, &cfg.weights.as_array())?;
    Ok((total, parts))
}

/// Sampling stream of a training step; a pure function of `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Pair trained at `step`: an epoch-wise permutation derived from `(seed, epoch)`.
pub fn pair_for_step(seed: u64, step: u64, n: usize) -> usize {
    use rand::seq::SliceRandom;
    let epoch = step / n as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[(step % n as u64) as usize]
}

/// Forward, backward and one Adam update on a single pair.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    data: &PairData,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepTerms> {
    let mut rng = step_rng(cfg.seed, step);
    let mut g = Graph::new();
    let (total, parts) = pair_loss(&mut g, model, store, data, cfg, &mut rng)?;
    let terms = parts.map(|p| p.map(|v| g.value(v).item()));
    let tv = g.value(total).item();
    g.backward(total, store)?;
    adam.step(store);
    Ok(StepTerms { terms, total: tv })
}

/// Runs steps `start..end`, each on the pair chosen by [`pair_for_step`]; `on_step`
/// observes the terms and the updated state after every step.
pub fn train_range<F>(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    pairs: &[PairData],
    cfg: &TrainConfig,
    start: u64,
    end: u64,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(u64, &StepTerms, &ParamStore, &Adam) -> Result<()>,
{
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no training pairs"));
    }
    for step in start..end {
        let data = &pairs[pair_for_step(cfg.seed, step, pairs.len())];
        let terms = train_step(model, store, adam, data, cfg, step).map_err(|e| match e {
            Error::NonFinite { term } => Error::NonFinite {
                term: format!("{term}` at step `{step}"),
            },
            e => e,
        })?;
        on_step(step, &terms, store, adam)?;
    }
    Ok(())
}

/// Keypoint selection and RANSAC settings used at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterConfig {
    pub keypoints: usize,
    pub overlap_threshold: f64,
    pub ransac: RansacConfig,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            keypoints: 250,
            overlap_threshold: 0.5,
            ransac: RansacConfig::default(),
        }
    }
}

/// Result of registering one pair.
#[derive(Debug, Clone)]
pub struct Registration {
    pub result: RegistrationResult,
    pub tau: f64,
    pub keypoints_p: Vec<Keypoint>,
    pub keypoints_q: Vec<Keypoint>,
    pub gamma_p: Vec<f64>,
    pub gamma_q: Vec<f64>,
}

/// Keypoints of one cloud, optionally restricted to its predicted overlap.
pub fn keypoints(model: &Model, f: &CloudFeatures, gamma: &[f64], cfg: &RegisterConfig, filter: bool) -> Result<Vec<Keypoint>> {
    let src = KeypointSource {
        layout: &f.layout,
        scores: &f.scores,
        heights: &f.heights,
        descriptors: &f.descriptors,
        config: &model.bev,
    };
    let ov = OverlapFilter {
        layout: &f.deep_layout,
        gamma,
        factor: model.config.deep_stride(),
    };
    let threshold = if filter { cfg.overlap_threshold } else { 0.0 };
    heads::extract_keypoints(&src, Some(&ov), cfg.keypoints, threshold)
}

fn stack(kps: &[Keypoint]) -> (Mat, Vec<Vector3<f64>>) {
    let rows: Vec<Vec<f64>> = kps.iter().map(|k| k.descriptor.clone()).collect();
    let dim = kps.first().map_or(0, |k| k.descriptor.len());
    let desc = if rows.is_empty() { Mat::zeros(0, dim) } else { Mat::from_rows(&rows) };
    (desc, kps.iter().map(|k| Vector3::new(k.position[0], k.position[1], k.position[2])).collect())
}

/// Registration from cached per-cloud features.
pub fn register_features(
    model: &Model,
    store: &ParamStore,
    fp: &CloudFeatures,
    fq: &CloudFeatures,
    cfg: &RegisterConfig,
    filter: bool,
) -> Result<Registration> {
    let (gp, gq) = model.overlap_scores(store, fp, fq)?;
    let tau = heads::similarity(&gp, &gq)?;
    let kp = keypoints(model, fp, &gp, cfg, filter)?;
    let kq = keypoints(model, fq, &gq, cfg, filter)?;
    let failed = |n| RegistrationResult {
        transform: RigidTransform::identity(),
        inliers: vec![],
        inlier_ratio: 0.0,
        iterations: 0,
        correspondences: n,
        success: false,
    };
    let result = if kp.is_empty() || kq.is_empty() {
        failed(0)
    } else {
        let (dp, pp) = stack(&kp);
        let (dq, pq) = stack(&kq);
        let cs = registration::mutual_nn(&dp, &dq)?;
        match registration::ransac_register(&cs, &pp, &pq, &cfg.ransac) {
            Ok(r) => r,
            Err(Error::InsufficientData { got, .. }) => failed(got),
            Err(e) => return Err(e),
        }
    };
    Ok(Registration {
        result,
        tau,
        keypoints_p: kp,
        keypoints_q: kq,
        gamma_p: gp,
        gamma_q: gq,
    })
}

/// Full pipeline: voxelize, features, overlap, keypoints, matching, RANSAC.
pub fn register_clouds(
    model: &Model,
    store: &ParamStore,
    p: &PointCloud,
    q: &PointCloud,
    cfg: &RegisterConfig,
    filter: bool,
) -> Result<Registration> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput("registration needs two non-empty clouds"));
    }
    let (gp, gq) = (BevGrid::voxelize(p, &model.bev), BevGrid::voxelize(q, &model.bev));
    let fp = model.features(store, &gp)?;
    let fq = model.features(store, &gq)?;
    register_features(model, store, &fp, &fq, cfg, filter)
}
