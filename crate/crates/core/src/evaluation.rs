//! Overlap, registration and loop-closure metrics.

use crate::bev::RigidTransform;
use crate::{Error, Result};

/// Confusion counts of a thresholded overlap map against its labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn metrics(&self) -> OverlapMetrics {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        OverlapMetrics {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
        }
    }
}

/// IOU, precision and recall; `None` marks an empty denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OverlapMetrics {
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Counts with a cell predicted positive when `score ≥ threshold`.
pub fn confusion(scores: &[f64], labels: &[f64], threshold: f64) -> Result<Confusion> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn overlap_metrics(scores: &[f64], labels: &[f64], threshold: f64) -> Result<OverlapMetrics> {
    Ok(confusion(scores, labels, threshold)?.metrics())
}

/// Mean of the defined values and how many were defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut s, mut n) = (0.0, 0);
    for v in values.into_iter().flatten() {
        s += v;
        n += 1;
    }
    ((n > 0).then(|| s / n as f64), n)
}

/// Per-metric means over a set of per-map results, skipping undefined entries.
pub fn mean_overlap(ms: &[OverlapMetrics]) -> OverlapMetrics {
    OverlapMetrics {
        iou: mean_defined(ms.iter().map(|m| m.iou)).0,
        precision: mean_defined(ms.iter().map(|m| m.precision)).0,
        recall: mean_defined(ms.iter().map(|m| m.recall)).0,
    }
}

/// Translation error in metres and rotation error in degrees.
pub fn pose_errors(estimate: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let rte = (estimate.translation() - gt.translation()).norm();
    let r = gt.rotation().transpose() * estimate.rotation();
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    (rte, c.acos().to_degrees())
}

/// Errors of one registration attempt; failed attempts always count as misses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationMetrics {
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
}

impl RegistrationMetrics {
    pub fn new(estimate: &RigidTransform, gt: &RigidTransform, success: bool) -> Self {
        let (rte, rre) = pose_errors(estimate, gt);
        Self { rte, rre, success }
    }

    pub fn passes(&self, rte_max: f64, rre_max: f64) -> bool {
        self.success && self.rte < rte_max && self.rre < rre_max
    }
}

pub const RTE_THRESHOLD: f64 = 2.0;
pub const RRE_THRESHOLD: f64 = 5.0;

/// Fraction of attempts with `rte < rte_max` and `rre < rre_max`.
pub fn registration_recall(results: &[RegistrationMetrics], rte_max: f64, rre_max: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput("registration recall over no pairs"));
    }
    let ok = results.iter().filter(|r| r.passes(rte_max, rre_max)).count();
    Ok(ok as f64 / results.len() as f64)
}

/// Loop-closure protocol settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopProtocol {
    /// Frames with `|j − q| ≤ exclusion` are never scored for query `q`.
    pub exclusion: usize,
    pub success_radius: f64,
}

impl Default for LoopProtocol {
    fn default() -> Self {
        Self {
            exclusion: 100,
            success_radius: 10.0,
        }
    }
}

/// Per-query selections and the resulting recall.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub queries: usize,
    pub correct: usize,
    pub recall: f64,
    /// `(query, best candidate, its score)` per valid query.
    pub selections: Vec<(usize, usize, f64)>,
}

fn planar_gap(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let d = a.translation() - b.translation();
    d.x.hypot(d.y)
}

/// Recall@1: every frame outside the exclusion window is scored and the
/// argmax (lower index on ties) is correct if it lies within the radius.
/// Queries without any candidate inside the radius are skipped.
pub fn recall_at_1<F>(poses: &[RigidTransform], protocol: &LoopProtocol, mut score: F) -> Result<RecallReport>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    if poses.len() <= protocol.exclusion {
        return Err(Error::EmptyInput("sequence is not longer than the exclusion window"));
    }
    let candidates = |q: usize| (0..poses.len()).filter(move |&j| j.abs_diff(q) > protocol.exclusion);
    let mut selections = Vec::new();
    let mut correct = 0;
    for q in 0..poses.len() {
        if !candidates(q).any(|j| planar_gap(&poses[q], &poses[j]) < protocol.success_radius) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in candidates(q) {
            let s = score(q, j)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (j, s) = best.expect("a candidate exists");
        if planar_gap(&poses[q], &poses[j]) < protocol.success_radius {
            correct += 1;
        }
        selections.push((q, j, s));
    }
    if selections.is_empty() {
        return Err(Error::EmptyInput("no query has a loop candidate"));
    }
    Ok(RecallReport {
        queries: selections.len(),
        correct,
        recall: correct as f64 / selections.len() as f64,
        selections,
    })
}
