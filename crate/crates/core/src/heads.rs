//! Task heads: descriptors, keypoint saliency, height regression and overlap.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::Rng;

use crate::bev::{BevConfig, BevGrid};
use crate::nn::layers::{attention, Attention, Conv, Mlp3};
use crate::nn::sparse::{self, Pointwise, SparseFeatureMap, SparseLayout};
use crate::nn::{Graph, Mat, ParamStore, Var};
use crate::{Error, Result};

/// Smallest per-cell channel maximum accepted by [`channel_score`].
pub const MIN_CHANNEL_MAX: f64 = 1e-12;

/// Per-cell spatial score, channel score and the combined detection score.
#[derive(Debug, Clone)]
pub struct SaliencyMaps {
    pub alpha: SparseFeatureMap,
    pub beta: SparseFeatureMap,
    /// `n × 1` column of detection scores.
    pub score: Var,
}

/// Per-pillar height weights and the regressed heights (`n × 1`).
#[derive(Debug, Clone, Copy)]
pub struct HeightMap {
    pub weights: Var,
    pub z: Var,
}

/// Overlap probability per active deep cell.
#[derive(Debug, Clone)]
pub struct OverlapMap {
    pub layout: Rc<SparseLayout>,
    /// `n × 1` column of scores in `[0, 1]`.
    pub gamma: Var,
}

impl OverlapMap {
    pub fn occupied(&self) -> usize {
        self.layout.len()
    }
}

/// A 3D keypoint with its detection score and unit descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub cell: (u32, u32),
    pub position: [f64; 3],
    pub score: f64,
    pub descriptor: Vec<f64>,
}

/// 1×1 convolution followed by per-cell L2 normalization.
pub fn describe(g: &mut Graph, store: &ParamStore, head: &Conv, f1: &SparseFeatureMap) -> Result<SparseFeatureMap> {
    let pre = head.subm(g, store, f1)?;
    sparse::pointwise(g, &pre, Pointwise::L2Norm)
}

/// `α = softplus(D − mean of D over the non-empty s×s neighborhood)`.
pub fn spatial_saliency(g: &mut Graph, d: &SparseFeatureMap, window: usize) -> Result<SparseFeatureMap> {
    let pooled = sparse::sparse_avg_pool(g, d, window)?;
    let diff = g.sub(d.features, pooled.features)?;
    let alpha = g.softplus(diff);
    SparseFeatureMap::new(g, d.layout.clone(), alpha)
}

/// `β = D / max_c D` per cell; a non-positive maximum is rejected.
pub fn channel_score(g: &mut Graph, d: &SparseFeatureMap) -> Result<SparseFeatureMap> {
    let m = g.row_max(d.features);
    if let Some((r, v)) = g.value(m).data().iter().enumerate().find(|(_, &v)| !(v > MIN_CHANNEL_MAX)) {
        let (i, j) = d.layout.coords()[r];
        return Err(Error::DegenerateFeature(format!("cell ({i}, {j}) has channel maximum {v}")));
    }
    let beta = g.div_rows(d.features, m)?;
    SparseFeatureMap::new(g, d.layout.clone(), beta)
}

/// `s = max_k α_k β_k` per cell.
pub fn detection_score(g: &mut Graph, alpha: &SparseFeatureMap, beta: &SparseFeatureMap) -> Result<Var> {
    if alpha.layout.coords() != beta.layout.coords() {
        return Err(Error::Shape("alpha and beta maps must share an active set".into()));
    }
    let prod = g.mul(alpha.features, beta.features)?;
    Ok(g.row_max(prod))
}

/// All three saliency quantities from a descriptor map.
pub fn saliency(g: &mut Graph, d: &SparseFeatureMap, window: usize) -> Result<SaliencyMaps> {
    let alpha = spatial_saliency(g, d, window)?;
    let beta = channel_score(g, d)?;
    let score = detection_score(g, &alpha, &beta)?;
    Ok(SaliencyMaps { alpha, beta, score })
}

/// `(channel, center height)` lists of the occupied voxels, one per active cell.
pub fn pillar_height_table(layout: &SparseLayout, grid: &BevGrid) -> Result<Vec<Vec<(usize, f64)>>> {
    let shape = grid.shape();
    if layout.height() != shape.rows || layout.width() != shape.cols {
        return Err(Error::Shape("height head layout does not match the grid".into()));
    }
    Ok(layout
        .coords()
        .iter()
        .map(|&(i, j)| grid.pillar_heights(i as usize, j as usize))
        .collect())
}

/// Sigmoid voxel weights from a 3×3 conv; heights are their renormalized mean over occupied voxels.
pub fn regress_heights(
    g: &mut Graph,
    store: &ParamStore,
    head: &Conv,
    f1: &SparseFeatureMap,
    grid: &BevGrid,
) -> Result<HeightMap> {
    if head.cout != grid.shape().layers {
        return Err(Error::Shape(format!(
            "height head has {} outputs for {} layers",
            head.cout,
            grid.shape().layers
        )));
    }
    let table = Rc::new(pillar_height_table(&f1.layout, grid)?);
    let pre = head.subm(g, store, f1)?;
    let weights = g.sigmoid(pre.features);
    let z = g.weighted_mean(weights, table)?;
    Ok(HeightMap { weights, z })
}

/// Cross-attention fusion and the per-cell overlap classifier.
#[derive(Debug, Clone, Copy)]
pub struct OverlapHead {
    pub attention: Attention,
    pub mlp: Mlp3,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl OverlapHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, attention_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            attention: Attention::new(store, &format!("{name}.att"), channels, attention_dim, rng),
            mlp: Mlp3::new(store, &format!("{name}.mlp"), [2 * channels, channels, channels, channels], rng),
            conv1: Conv::new(store, &format!("{name}.cls1"), 3, channels, channels, rng),
            conv2: Conv::new(store, &format!("{name}.cls2"), 3, channels, 1, rng),
        }
    }

    /// `M = E + MLP(cat(E, att(E, E_other, E_other)))`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e: &SparseFeatureMap,
        other: &SparseFeatureMap,
    ) -> Result<SparseFeatureMap> {
        let a = attention(g, store, &self.attention, e, other, other)?;
        let cat = g.concat_cols(e.features, a.features)?;
        let delta = self.mlp.forward(g, store, cat)?;
        let m = g.add(e.features, delta)?;
        SparseFeatureMap::new(g, e.layout.clone(), m)
    }

    /// `γ = sigmoid(conv(relu(conv(M))))` on the active cells of `m`.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, m: &SparseFeatureMap) -> Result<OverlapMap> {
        let h = self.conv1.subm(g, store, m)?;
        let h = sparse::pointwise(g, &h, Pointwise::Relu)?;
        let o = self.conv2.subm(g, store, &h)?;
        let gamma = g.sigmoid(o.features);
        Ok(OverlapMap {
            layout: m.layout.clone(),
            gamma,
        })
    }
}

/// Bilateral overlap maps for two deepest encoder maps.
pub fn overlap_head(
    g: &mut Graph,
    store: &ParamStore,
    head: &OverlapHead,
    e_p: &SparseFeatureMap,
    e_q: &SparseFeatureMap,
) -> Result<(OverlapMap, OverlapMap)> {
    if e_p.layout.is_empty() || e_q.layout.is_empty() {
        return Err(Error::EmptyContext("overlap head needs non-empty deep maps"));
    }
    let m_p = head.fuse(g, store, e_p, e_q)?;
    let m_q = head.fuse(g, store, e_q, e_p)?;
    Ok((head.classify(g, store, &m_p)?, head.classify(g, store, &m_q)?))
}

/// `τ = ½(mean γ_P + mean γ_Q)`.
pub fn similarity(gamma_p: &[f64], gamma_q: &[f64]) -> Result<f64> {
    if gamma_p.is_empty() || gamma_q.is_empty() {
        return Err(Error::EmptyContext("similarity needs non-empty overlap maps"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(gamma_p) + mean(gamma_q)))
}

/// Plain-value inputs for keypoint extraction on the fine grid.
#[derive(Debug, Clone, Copy)]
pub struct KeypointSource<'a> {
    pub layout: &'a SparseLayout,
    pub scores: &'a [f64],
    pub heights: &'a [f64],
    pub descriptors: &'a Mat,
    pub config: &'a BevConfig,
}

/// Deep-resolution overlap scores; each deep cell covers a `factor × factor` fine block.
#[derive(Debug, Clone, Copy)]
pub struct OverlapFilter<'a> {
    pub layout: &'a SparseLayout,
    pub gamma: &'a [f64],
    pub factor: usize,
}

impl OverlapFilter<'_> {
    /// Upsampled overlap score of a fine cell; 0 when its deep cell is inactive.
    pub fn score_at(&self, i: u32, j: u32) -> f64 {
        let f = self.factor as isize;
        self.layout
            .row_of(i as isize / f, j as isize / f)
            .map_or(0.0, |r| self.gamma[r])
    }
}

/// Top-`k` cells by detection score among those passing the overlap filter.
/// A threshold of 0 (or no filter) keeps every active cell as a candidate.
pub fn extract_keypoints(
    src: &KeypointSource<'_>,
    overlap: Option<&OverlapFilter<'_>>,
    k: usize,
    threshold: f64,
) -> Result<Vec<Keypoint>> {
    let n = src.layout.len();
    if src.scores.len() != n || src.heights.len() != n || src.descriptors.rows() != n {
        return Err(Error::Shape("keypoint inputs disagree on the active cell count".into()));
    }
    let coords = src.layout.coords();
    let mut cand: Vec<usize> = (0..n)
        .filter(|&r| match overlap {
            Some(f) if threshold > 0.0 => f.score_at(coords[r].0, coords[r].1) >= threshold,
            _ => true,
        })
        .collect();
    cand.sort_by(|&a, &b| src.scores[b].total_cmp(&src.scores[a]).then(coords[a].cmp(&coords[b])));
    cand.truncate(k);
    Ok(cand
        .into_iter()
        .map(|r| {
            let (i, j) = coords[r];
            let [x, y] = src.config.cell_center(i as usize, j as usize, 1);
            Keypoint {
                cell: (i, j),
                position: [x, y, src.heights[r]],
                score: src.scores[r],
                descriptor: src.descriptors.row(r).to_vec(),
            }
        })
        .collect())
}

/// Header with the descriptor dimension, then `x,y,z,score,d0,d1,…` per keypoint.
pub fn format_keypoints(kps: &[Keypoint], descriptor_dim: usize) -> String {
    let mut s = format!("descriptor_dim={descriptor_dim}\n");
    for kp in kps {
        let vals = kp.position.iter().chain(std::iter::once(&kp.score)).chain(&kp.descriptor);
        let line: Vec<String> = vals.map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}
