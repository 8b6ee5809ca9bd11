//! Training losses and the geometric supervision they consume.

use std::collections::HashSet;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, PointCloud, RigidTransform, Vector3};
use crate::nn::sparse::{SparseFeatureMap, SparseLayout};
use crate::nn::{CircleGroups, CircleParams, Graph, Mat, Var};
use crate::{Error, Result};

/// Positive radius and the larger safe radius beyond which negatives are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radii {
    pub positive: f64,
    pub safe: f64,
}

impl Radii {
    /// `r_p = 1.5 × cell`, `r_s = 2 r_p`.
    pub fn for_cell(cell: f64) -> Self {
        let positive = 1.5 * cell;
        Self {
            positive,
            safe: 2.0 * positive,
        }
    }
}

/// One anchor with its positive and negative cells in the other cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSample {
    pub anchor: usize,
    /// Nearest positive; the pair used by the detection loss.
    pub matched: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn planar_dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Positions of `points` mapped by `t`, reduced to the plane.
pub fn planar_transformed(points: &[[f64; 3]], t: &RigidTransform) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| {
            let v = t.apply(&Vector3::new(p[0], p[1], p[2]));
            [v.x, v.y]
        })
        .collect()
}

/// Samples up to `n` anchors of `p` that have a positive in `q`, with at most
/// `max_negatives` negatives each. `gt` maps `q`'s frame into `p`'s frame;
/// distances are planar.
pub fn sample_correspondences(
    p: &[[f64; 3]],
    q: &[[f64; 3]],
    gt: &RigidTransform,
    n: usize,
    max_negatives: usize,
    radii: Radii,
    rng: &mut impl Rng,
) -> Result<Vec<CorrespondenceSample>> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::NoOverlap);
    }
    let qt = planar_transformed(q, gt);
    let (rp2, rs2) = (radii.positive.powi(2), radii.safe.powi(2));
    let mut eligible = Vec::new();
    for (a, pa) in p.iter().enumerate() {
        let pa = [pa[0], pa[1]];
        if qt.iter().any(|&b| planar_dist2(pa, b) <= rp2) {
            eligible.push(a);
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut chosen: Vec<usize> = sample(rng, eligible.len(), n.min(eligible.len()))
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    let mut out = Vec::with_capacity(chosen.len());
    for a in chosen {
        let pa = [p[a][0], p[a][1]];
        let mut positives = Vec::new();
        let mut far = Vec::new();
        let mut best = (f64::INFINITY, 0);
        for (b, &qb) in qt.iter().enumerate() {
            let d2 = planar_dist2(pa, qb);
            if d2 <= rp2 {
                positives.push(b);
                if d2 < best.0 {
                    best = (d2, b);
                }
            } else if d2 > rs2 {
                far.push(b);
            }
        }
        if far.is_empty() {
            continue;
        }
        let mut negatives: Vec<usize> = sample(rng, far.len(), max_negatives.min(far.len()))
            .into_iter()
            .map(|i| far[i])
            .collect();
        negatives.sort_unstable();
        out.push(CorrespondenceSample {
            anchor: a,
            matched: best.1,
            positives,
            negatives,
        });
    }
    if out.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok(out)
}

/// Row indices and groupings that turn a sample list into tape operations.
#[derive(Debug, Clone)]
pub struct SampleIndex {
    src_rows: Rc<Vec<usize>>,
    dst_rows: Rc<Vec<usize>>,
    groups: Rc<CircleGroups>,
    matched_pairs: Rc<Vec<usize>>,
    neg_groups: Vec<Vec<usize>>,
    anchors: Rc<Vec<usize>>,
    matched_rows: Rc<Vec<usize>>,
}

impl SampleIndex {
    pub fn new(samples: &[CorrespondenceSample]) -> Result<Self> {
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        let mut groups = Vec::with_capacity(samples.len());
        let mut matched_pairs = Vec::with_capacity(samples.len());
        let mut neg_groups = Vec::with_capacity(samples.len());
        for (k, s) in samples.iter().enumerate() {
            if s.positives.is_empty() || s.negatives.is_empty() {
                return Err(Error::SamplingContract(format!("sample {k} lacks positives or negatives")));
            }
            let mut push = |b: usize| {
                src.push(s.anchor);
                dst.push(b);
                src.len() - 1
            };
            let pos: Vec<usize> = s.positives.iter().map(|&b| push(b)).collect();
            let neg: Vec<usize> = s.negatives.iter().map(|&b| push(b)).collect();
            let m = s
                .positives
                .iter()
                .position(|&b| b == s.matched)
                .ok_or_else(|| Error::SamplingContract(format!("sample {k}: matched cell is not a positive")))?;
            matched_pairs.push(pos[m]);
            neg_groups.push(neg.clone());
            groups.push((pos, neg));
        }
        Ok(Self {
            src_rows: Rc::new(src),
            dst_rows: Rc::new(dst),
            groups: Rc::new(CircleGroups { groups }),
            matched_pairs: Rc::new(matched_pairs),
            neg_groups,
            anchors: Rc::new(samples.iter().map(|s| s.anchor).collect()),
            matched_rows: Rc::new(samples.iter().map(|s| s.matched).collect()),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Descriptor distance column over every sampled (anchor, other) pair.
    pub fn distances(&self, g: &mut Graph, src: Var, dst: Var) -> Result<Var> {
        let a = g.gather_rows(src, self.src_rows.clone())?;
        let b = g.gather_rows(dst, self.dst_rows.clone())?;
        g.row_dist(a, b)
    }
}

/// Circle loss over a distance column produced by [`SampleIndex::distances`].
pub fn circle_loss(g: &mut Graph, d: Var, index: &SampleIndex, params: CircleParams) -> Result<Var> {
    g.circle(d, index.groups.clone(), params)
}

/// `mean((d_pos − d_neg_min)(s_anchor + s_matched))`.
pub fn detection_loss(g: &mut Graph, d: Var, index: &SampleIndex, s_src: Var, s_dst: Var) -> Result<Var> {
    let d_pos = g.gather_rows(d, index.matched_pairs.clone())?;
    let d_neg = g.group_min(d, &index.neg_groups)?;
    let diff = g.sub(d_pos, d_neg)?;
    let sa = g.gather_rows(s_src, index.anchors.clone())?;
    let sm = g.gather_rows(s_dst, index.matched_rows.clone())?;
    let s = g.add(sa, sm)?;
    let prod = g.mul(diff, s)?;
    g.mean(prod)
}

/// Fixed height supervision for one direction of the regression loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTargets {
    /// Height of the planar-nearest raw point for every regressed cell.
    pub raw_z: Vec<f64>,
    /// Rows of the regressed cells that have a correspondent in the other cloud.
    pub rows: Vec<usize>,
    /// Correspondent row in the other cloud.
    pub corr: Vec<usize>,
    /// `R20 x + R21 y + t_z` of the correspondent's planar position.
    pub offset: Vec<f64>,
    /// `R22` of the transform into this cloud's frame.
    pub r22: f64,
}

/// Planar nearest-neighbour lookup over a point set, bucketed on a square grid.
#[derive(Debug, Clone)]
pub struct PlanarIndex {
    cell: f64,
    buckets: std::collections::HashMap<(i64, i64), Vec<usize>>,
    bounds: [i64; 4],
    points: Vec<[f64; 3]>,
}

impl PlanarIndex {
    pub fn new(points: Vec<[f64; 3]>, cell: f64) -> Self {
        let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
        for (n, p) in points.iter().enumerate() {
            buckets.entry(Self::key(cell, p[0], p[1])).or_default().push(n);
        }
        let mut bounds = [i64::MAX, i64::MIN, i64::MAX, i64::MIN];
        for &(a, b) in buckets.keys() {
            bounds = [bounds[0].min(a), bounds[1].max(a), bounds[2].min(b), bounds[3].max(b)];
        }
        Self {
            cell,
            buckets,
            bounds,
            points,
        }
    }

    fn key(cell: f64, x: f64, y: f64) -> (i64, i64) {
        ((x / cell).floor() as i64, (y / cell).floor() as i64)
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Index of the planar-nearest point (lower index on ties), searching rings until no closer point is possible.
    pub fn nearest(&self, x: f64, y: f64) -> Option<usize> {
        if self.points.is_empty() {
            return None;
        }
        let (ki, kj) = Self::key(self.cell, x, y);
        let mut best: Option<(f64, usize)> = None;
        let [a0, a1, b0, b1] = self.bounds;
        let max_ring = [ki - a0, a1 - ki, kj - b0, b1 - kj].into_iter().max().unwrap_or(0).max(0);
        for r in 0..=max_ring {
            if let Some((d2, _)) = best {
                let reach = (r - 1) as f64 * self.cell;
                if reach > 0.0 && reach * reach > d2 {
                    break;
                }
            }
            for a in ki - r..=ki + r {
                for b in kj - r..=kj + r {
                    if (a - ki).abs() != r && (b - kj).abs() != r {
                        continue;
                    }
                    for &n in self.buckets.get(&(a, b)).into_iter().flatten() {
                        let p = self.points[n];
                        let d2 = planar_dist2([x, y], [p[0], p[1]]);
                        if best.is_none_or(|(bd, bn)| d2 < bd || (d2 == bd && n < bn)) {
                            best = Some((d2, n));
                        }
                    }
                }
            }
        }
        best.map(|(_, n)| n)
    }
}

/// Raw points of `cloud` that fall inside the grid extent.
pub fn points_in_extent(cloud: &PointCloud, cfg: &BevConfig) -> Vec<[f64; 3]> {
    cloud
        .points()
        .iter()
        .map(|p| [p.x, p.y, p.z])
        .filter(|p| cfg.extent.contains(p))
        .collect()
}

/// Targets for `L_reg` of the cells `own` (planar centres; heights unused)
/// against raw points `raw` and the other cloud's cells `other`, whose frame
/// maps into `own`'s frame by `t`.
pub fn regression_targets(
    own: &[[f64; 3]],
    raw: &PlanarIndex,
    other: &[[f64; 3]],
    t: &RigidTransform,
    radius: f64,
) -> Result<RegressionTargets> {
    if own.is_empty() {
        return Err(Error::EmptyInput("regressed cloud is empty"));
    }
    let raw_z = own
        .iter()
        .map(|c| raw.nearest(c[0], c[1]).map(|n| raw.points()[n][2]))
        .collect::<Option<Vec<f64>>>()
        .ok_or(Error::EmptyInput("no raw points to supervise heights"))?;
    let moved = planar_transformed(other, t);
    let index = PlanarIndex::new(moved.iter().map(|m| [m[0], m[1], 0.0]).collect(), radius.max(1e-9));
    let r = t.rotation();
    let tz = t.translation().z;
    let (mut rows, mut corr, mut offset) = (Vec::new(), Vec::new(), Vec::new());
    for (a, c) in own.iter().enumerate() {
        if let Some(b) = index.nearest(c[0], c[1]) {
            if planar_dist2([c[0], c[1]], moved[b]) <= radius * radius {
                rows.push(a);
                corr.push(b);
                offset.push(r[(2, 0)] * other[b][0] + r[(2, 1)] * other[b][1] + tz);
            }
        }
    }
    Ok(RegressionTargets {
        raw_z,
        rows,
        corr,
        offset,
        r22: r[(2, 2)],
    })
}

/// `mean_a |z_a − z_raw(a)| + |z_a − z_other^T(a)|`, the second term only where a correspondent exists.
pub fn regression_loss_dir(g: &mut Graph, z_own: Var, z_other: Var, t: &RegressionTargets) -> Result<Var> {
    let n = g.shape(z_own).0;
    if n == 0 || n != t.raw_z.len() {
        return Err(Error::EmptyInput("regressed cloud is empty or mismatched"));
    }
    let raw = g.input(Mat::column(t.raw_z.clone()));
    let d1 = g.sub(z_own, raw)?;
    let a1 = g.abs(d1);
    let mut total = g.sum(a1);
    if !t.rows.is_empty() {
        let zo = g.gather_rows(z_own, Rc::new(t.rows.clone()))?;
        let zc = g.gather_rows(z_other, Rc::new(t.corr.clone()))?;
        let zc = g.scale(zc, t.r22);
        let off = g.input(Mat::column(t.offset.clone()));
        let zt = g.add(zc, off)?;
        let d2 = g.sub(zo, zt)?;
        let a2 = g.abs(d2);
        let s2 = g.sum(a2);
        total = g.add(total, s2)?;
    }
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Per-active-deep-cell overlap labels of both clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapLabels {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

fn footprint_labels(layout: &SparseLayout, cfg: &BevConfig, stride: usize, points: &[[f64; 3]], t: &RigidTransform) -> Vec<f64> {
    let mut hit = HashSet::new();
    for p in points {
        let v = t.apply(&Vector3::new(p[0], p[1], p[2]));
        if let (Some(i), Some(j)) = (cfg.bin(0, v.x), cfg.bin(1, v.y)) {
            hit.insert(((i / stride) as u32, (j / stride) as u32));
        }
    }
    layout.coords().iter().map(|c| if hit.contains(c) { 1.0 } else { 0.0 }).collect()
}

/// A deep cell is labeled 1 iff a point of the other cloud, mapped into this
/// frame, lands in its planar footprint. `gt` maps `q`'s frame into `p`'s.
pub fn make_overlap_labels(
    cfg: &BevConfig,
    deep_stride: usize,
    deep_p: &SparseLayout,
    deep_q: &SparseLayout,
    raw_p: &PointCloud,
    raw_q: &PointCloud,
    gt: &RigidTransform,
) -> OverlapLabels {
    let pts = |c: &PointCloud| c.points().iter().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>();
    OverlapLabels {
        p: footprint_labels(deep_p, cfg, deep_stride, &pts(raw_q), gt),
        q: footprint_labels(deep_q, cfg, deep_stride, &pts(raw_p), &gt.inverse()),
    }
}

/// Mean binary cross entropy over the active cells of one overlap map.
pub fn bce_loss(g: &mut Graph, gamma: Var, labels: &[f64]) -> Result<Var> {
    if g.shape(gamma).0 != labels.len() {
        return Err(Error::Shape(format!(
            "{} overlap scores for {} labels",
            g.shape(gamma).0,
            labels.len()
        )));
    }
    let b = g.bce(gamma, Rc::new(labels.to_vec()))?;
    g.mean(b)
}

/// `BCE(γ_P, l_P) + BCE(γ_Q, l_Q)`.
pub fn classification_bce(g: &mut Graph, gamma_p: Var, gamma_q: Var, labels: &OverlapLabels) -> Result<Var> {
    let a = bce_loss(g, gamma_p, &labels.p)?;
    let b = bce_loss(g, gamma_q, &labels.q)?;
    g.add(a, b)
}

/// Row norms of a map's current values.
pub fn row_norms(m: &Mat) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Removes rows whose feature norm is below `min_norm` from every sample; drops emptied samples.
pub fn filter_degenerate(samples: Vec<CorrespondenceSample>, src_norm: &[f64], dst_norm: &[f64], min_norm: f64) -> Vec<CorrespondenceSample> {
    samples
        .into_iter()
        .filter(|s| src_norm[s.anchor] >= min_norm && dst_norm[s.matched] >= min_norm)
        .filter_map(|mut s| {
            s.positives.retain(|&b| dst_norm[b] >= min_norm);
            s.negatives.retain(|&b| dst_norm[b] >= min_norm);
            (!s.negatives.is_empty()).then_some(s)
        })
        .collect()
}

/// Circle loss on L2-normalized deep features, for one sampling direction.
pub fn deep_circle_loss(
    g: &mut Graph,
    src: &SparseFeatureMap,
    dst: &SparseFeatureMap,
    index: &SampleIndex,
    params: CircleParams,
) -> Result<Var> {
    let a = g.gather_rows(src.features, index.src_rows.clone())?;
    let b = g.gather_rows(dst.features, index.dst_rows.clone())?;
    let a = g.l2_norm_rows(a, crate::nn::sparse::MIN_NORM)?;
    let b = g.l2_norm_rows(b, crate::nn::sparse::MIN_NORM)?;
    let d = g.row_dist(a, b)?;
    g.circle(d, index.groups.clone(), params)
}

/// Multipliers of the individual loss terms; zero disables a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub desc: f64,
    pub det: f64,
    pub reg: f64,
    pub bce: f64,
    pub sg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            desc: 1.0,
            det: 1.0,
            reg: 1.0,
            bce: 1.0,
            sg: 1.0,
        }
    }
}

impl LossWeights {
    pub const NAMES: [&'static str; 5] = ["desc", "det", "reg", "bce", "sg"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.desc, self.det, self.reg, self.bce, self.sg]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `Σ w_t · part_t` over named parts; disabled or absent parts are skipped.
pub fn total_loss(g: &mut Graph, parts: &[(&str, Option<Var>)], weights: &[f64]) -> Result<Var> {
    if parts.len() != weights.len() {
        return Err(Error::Shape(format!("{} loss parts for {} weights", parts.len(), weights.len())));
    }
    let mut total: Option<Var> = None;
    for (&(name, part), &w) in parts.iter().zip(weights) {
        let Some(v) = part else { continue };
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite { term: name.to_string() });
        }
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.unwrap_or_else(|| g.input(Mat::scalar(0.0)));
    if !g.value(total).all_finite() {
        return Err(Error::NonFinite { term: "total".into() });
    }
    Ok(total)
}
