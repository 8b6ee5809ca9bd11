//! Sparse BEV UNet backbone and the composed per-pair forward pass.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{BevConfig, BevGrid};
use crate::heads::{self, HeightMap, OverlapHead, OverlapMap, SaliencyMaps};
use crate::nn::layers::{Conv, ResBlock};
use crate::nn::sparse::{self, Pointwise, SparseFeatureMap, SparseLayout};
use crate::nn::{Graph, Mat, ParamStore};
use crate::{Error, Result};

/// Network widths and initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder width per level; level `l` runs at stride `2^l`.
    pub channels: Vec<usize>,
    pub descriptor_dim: usize,
    pub attention_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            descriptor_dim: 32,
            attention_dim: 64,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, bev: &BevConfig) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("channels must be a non-empty list of positive widths".into()));
        }
        if self.descriptor_dim == 0 || self.attention_dim == 0 {
            return Err(Error::Config("descriptor_dim and attention_dim must be positive".into()));
        }
        let f = self.deep_stride();
        if bev.shape.rows % f != 0 || bev.shape.cols % f != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible by the deep stride {f}",
                bev.shape.rows, bev.shape.cols
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Fine cells per deep cell along each axis.
    pub fn deep_stride(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Parameter handles of the whole network.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub bev: BevConfig,
    pub stem: Conv,
    pub down: Vec<Conv>,
    pub enc: Vec<ResBlock>,
    pub dec_conv: Vec<Conv>,
    pub dec: Vec<ResBlock>,
    pub descriptor: Conv,
    pub height: Conv,
    pub overlap: OverlapHead,
}

/// Differentiable outputs of one cloud.
#[derive(Debug, Clone)]
pub struct CloudOutputs {
    pub descriptors: SparseFeatureMap,
    pub saliency: SaliencyMaps,
    pub heights: HeightMap,
    pub deep: SparseFeatureMap,
}

/// Differentiable outputs of a pair, including both overlap maps.
#[derive(Debug, Clone)]
pub struct PairOutputs {
    pub p: CloudOutputs,
    pub q: CloudOutputs,
    pub overlap_p: OverlapMap,
    pub overlap_q: OverlapMap,
}

/// Plain values of one cloud, detached from any graph.
#[derive(Debug, Clone)]
pub struct CloudFeatures {
    pub layout: Rc<SparseLayout>,
    pub descriptors: Mat,
    pub scores: Vec<f64>,
    pub heights: Vec<f64>,
    pub deep_layout: Rc<SparseLayout>,
    pub deep: Mat,
}

/// Occupied pillars as a sparse layout.
pub fn grid_layout(grid: &BevGrid) -> Result<SparseLayout> {
    let s = grid.shape();
    let coords = grid.occupied_pillars().into_iter().map(|(i, j)| (i as u32, j as u32)).collect();
    SparseLayout::new(s.rows, s.cols, coords)
}

/// Occupancy channels of every occupied pillar as an input map.
pub fn grid_input(g: &mut Graph, grid: &BevGrid) -> Result<SparseFeatureMap> {
    let layout = Rc::new(grid_layout(grid)?);
    let c = grid.shape().layers;
    let mut data = Vec::with_capacity(layout.len() * c);
    for &(i, j) in layout.coords() {
        data.extend(grid.pillar_channels(i as usize, j as usize).iter().map(|&v| f64::from(v)));
    }
    let x = g.input(Mat::from_vec(layout.len(), c, data));
    SparseFeatureMap::new(g, layout, x)
}

impl Model {
    /// Builds the network and a freshly initialized parameter store.
    pub fn new(config: ModelConfig, bev: BevConfig) -> Result<(Self, ParamStore)> {
        bev.validate()?;
        config.validate(&bev)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let layers = bev.shape.layers;
        let stem = Conv::new(&mut store, "stem", 3, layers, ch[0], &mut rng);
        let mut enc = vec![ResBlock::new(&mut store, "enc0", ch[0], &mut rng)];
        let mut down = Vec::new();
        for l in 1..ch.len() {
            down.push(Conv::new(&mut store, &format!("down{l}"), 2, ch[l - 1], ch[l], &mut rng));
            enc.push(ResBlock::new(&mut store, &format!("enc{l}"), ch[l], &mut rng));
        }
        let mut dec_conv = Vec::new();
        let mut dec = Vec::new();
        for l in (0..ch.len() - 1).rev() {
            dec_conv.push(Conv::new(&mut store, &format!("up{l}"), 3, ch[l] + ch[l + 1], ch[l], &mut rng));
            dec.push(ResBlock::new(&mut store, &format!("dec{l}"), ch[l], &mut rng));
        }
        let descriptor = Conv::new(&mut store, "desc", 1, ch[0], config.descriptor_dim, &mut rng);
        let height = Conv::new(&mut store, "height", 3, ch[0], layers, &mut rng);
        let deep = *ch.last().expect("validated non-empty");
        let overlap = OverlapHead::new(&mut store, "overlap", deep, config.attention_dim, &mut rng);
        let model = Self {
            config,
            bev,
            stem,
            down,
            enc,
            dec_conv,
            dec,
            descriptor,
            height,
            overlap,
        };
        Ok((model, store))
    }

    /// Encoder maps `E¹…E^s` followed by the finest decoder map `F¹`.
    pub fn backbone(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &SparseFeatureMap,
    ) -> Result<(Vec<SparseFeatureMap>, SparseFeatureMap)> {
        let h = self.stem.subm(g, store, x)?;
        let h = sparse::pointwise(g, &h, Pointwise::Relu)?;
        let mut enc = vec![self.enc[0].forward(g, store, &h)?];
        for (l, down) in self.down.iter().enumerate() {
            let h = down.strided(g, store, &enc[l])?;
            let h = sparse::pointwise(g, &h, Pointwise::Relu)?;
            enc.push(self.enc[l + 1].forward(g, store, &h)?);
        }
        let mut d = enc.last().expect("at least one level").clone();
        for (step, l) in (0..enc.len() - 1).rev().enumerate() {
            let u = sparse::upsample_concat(g, &d, &enc[l])?;
            let h = self.dec_conv[step].subm(g, store, &u)?;
            let h = sparse::pointwise(g, &h, Pointwise::Relu)?;
            d = self.dec[step].forward(g, store, &h)?;
        }
        Ok((enc, d))
    }

    /// Descriptors, saliency, heights and the deepest encoder map of one grid.
    pub fn forward_cloud(&self, g: &mut Graph, store: &ParamStore, grid: &BevGrid) -> Result<CloudOutputs> {
        if grid.config() != &self.bev {
            return Err(Error::Shape("grid configuration differs from the model's".into()));
        }
        let x = grid_input(g, grid)?;
        let (mut enc, f1) = self.backbone(g, store, &x)?;
        let descriptors = heads::describe(g, store, &self.descriptor, &f1)?;
        let saliency = heads::saliency(g, &descriptors, self.bev.window)?;
        let heights = heads::regress_heights(g, store, &self.height, &f1, grid)?;
        let deep = enc.pop().expect("at least one level");
        Ok(CloudOutputs {
            descriptors,
            saliency,
            heights,
            deep,
        })
    }

    pub fn forward_pair(&self, g: &mut Graph, store: &ParamStore, p: &BevGrid, q: &BevGrid) -> Result<PairOutputs> {
        let p = self.forward_cloud(g, store, p)?;
        let q = self.forward_cloud(g, store, q)?;
        let (overlap_p, overlap_q) = heads::overlap_head(g, store, &self.overlap, &p.deep, &q.deep)?;
        Ok(PairOutputs {
            p,
            q,
            overlap_p,
            overlap_q,
        })
    }

    /// Runs one cloud without recording gradients for later use.
    pub fn features(&self, store: &ParamStore, grid: &BevGrid) -> Result<CloudFeatures> {
        let mut g = Graph::new();
        let out = self.forward_cloud(&mut g, store, grid)?;
        Ok(CloudFeatures {
            layout: out.descriptors.layout.clone(),
            descriptors: g.value(out.descriptors.features).clone(),
            scores: g.value(out.saliency.score).data().to_vec(),
            heights: g.value(out.heights.z).data().to_vec(),
            deep_layout: out.deep.layout.clone(),
            deep: g.value(out.deep.features).clone(),
        })
    }

    /// Overlap scores of both clouds from cached deep features.
    pub fn overlap_scores(&self, store: &ParamStore, p: &CloudFeatures, q: &CloudFeatures) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let ep = g.input(p.deep.clone());
        let ep = SparseFeatureMap::new(&g, p.deep_layout.clone(), ep)?;
        let eq = g.input(q.deep.clone());
        let eq = SparseFeatureMap::new(&g, q.deep_layout.clone(), eq)?;
        let (op, oq) = heads::overlap_head(&mut g, store, &self.overlap, &ep, &eq)?;
        Ok((g.value(op.gamma).data().to_vec(), g.value(oq.gamma).data().to_vec()))
    }
}
