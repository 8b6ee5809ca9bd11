//! Sparse 2D feature maps over BEV cells and the layers that act on them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::tape::{ConvRules, Graph, RowMix, Var};
use super::Mat;

/// Active cell set of a sparse map: unique, in-bounds, lexicographically sorted.
#[derive(Debug)]
pub struct SparseLayout {
    height: usize,
    width: usize,
    coords: Vec<(u32, u32)>,
    lookup: Vec<i32>,
    subm_cache: RefCell<HashMap<usize, Rc<ConvRules>>>,
    pool_cache: RefCell<HashMap<usize, Rc<RowMix>>>,
}

impl SparseLayout {
    /// Sorts and deduplicates `coords`; out-of-bounds cells are an error.
    pub fn new(height: usize, width: usize, mut coords: Vec<(u32, u32)>) -> Result<Self> {
        coords.sort_unstable();
        coords.dedup();
        let mut lookup = vec![-1i32; height * width];
        for (r, &(i, j)) in coords.iter().enumerate() {
            if i as usize >= height || j as usize >= width {
                return Err(Error::Shape(format!("cell ({i}, {j}) outside {height}×{width}")));
            }
            lookup[i as usize * width + j as usize] = r as i32;
        }
        Ok(Self {
            height,
            width,
            coords,
            lookup,
            subm_cache: RefCell::default(),
            pool_cache: RefCell::default(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Row index of cell `(i, j)` if active.
    pub fn row_of(&self, i: isize, j: isize) -> Option<usize> {
        if i < 0 || j < 0 || i as usize >= self.height || j as usize >= self.width {
            return None;
        }
        let r = self.lookup[i as usize * self.width + j as usize];
        (r >= 0).then_some(r as usize)
    }

    /// Layout of the stride-2 coarsening: a coarse cell is active iff any child is.
    pub fn coarsened(&self) -> Result<SparseLayout> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Shape(format!(
                "strided conv needs even dims, got {}×{}",
                self.height, self.width
            )));
        }
        let coords = self.coords.iter().map(|&(i, j)| (i / 2, j / 2)).collect();
        SparseLayout::new(self.height / 2, self.width / 2, coords)
    }

    /// Rulebook of a `k × k` submanifold convolution (output set = input set).
    pub fn subm_rules(&self, k: usize) -> Result<Rc<ConvRules>> {
        if k % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {k} must be odd")));
        }
        if let Some(r) = self.subm_cache.borrow().get(&k) {
            return Ok(r.clone());
        }
        let r = (k / 2) as isize;
        let mut pairs = Vec::with_capacity(k * k);
        for di in -r..=r {
            for dj in -r..=r {
                let p: Vec<(u32, u32)> = self
                    .coords
                    .iter()
                    .enumerate()
                    .filter_map(|(out, &(i, j))| {
                        self.row_of(i as isize + di, j as isize + dj)
                            .map(|inp| (inp as u32, out as u32))
                    })
                    .collect();
                pairs.push(p);
            }
        }
        let rules = Rc::new(ConvRules::new(self.len(), self.len(), pairs));
        self.subm_cache.borrow_mut().insert(k, rules.clone());
        Ok(rules)
    }

    /// Rulebook of the 2×2 stride-2 convolution into `coarse`.
    pub fn strided_rules(&self, coarse: &SparseLayout) -> Rc<ConvRules> {
        let mut pairs = vec![Vec::new(); 4];
        for (inp, &(i, j)) in self.coords.iter().enumerate() {
            let out = coarse
                .row_of((i / 2) as isize, (j / 2) as isize)
                .expect("coarse layout covers every parent");
            let o = ((i % 2) * 2 + (j % 2)) as usize;
            pairs[o].push((inp as u32, out as u32));
        }
        Rc::new(ConvRules::new(self.len(), coarse.len(), pairs))
    }

    /// Mean over active cells in the `s × s` window (truncated at borders, center included).
    pub fn avg_pool_mix(&self, s: usize) -> Result<Rc<RowMix>> {
        if s % 2 == 0 {
            return Err(Error::Shape(format!("pool window {s} must be odd")));
        }
        if let Some(m) = self.pool_cache.borrow().get(&s) {
            return Ok(m.clone());
        }
        let r = (s / 2) as isize;
        let mut entries = Vec::new();
        for (out, &(i, j)) in self.coords.iter().enumerate() {
            let start = entries.len();
            for di in -r..=r {
                for dj in -r..=r {
                    if let Some(inp) = self.row_of(i as isize + di, j as isize + dj) {
                        entries.push((out as u32, inp as u32, 0.0));
                    }
                }
            }
            let w = 1.0 / (entries.len() - start) as f64;
            entries[start..].iter_mut().for_each(|e| e.2 = w);
        }
        let mix = Rc::new(RowMix {
            n_in: self.len(),
            n_out: self.len(),
            entries,
        });
        self.pool_cache.borrow_mut().insert(s, mix.clone());
        Ok(mix)
    }
}

/// Sparse map living on a [`Graph`]: a shared layout plus an `n_active × channels` node.
#[derive(Debug, Clone)]
pub struct SparseFeatureMap {
    pub layout: Rc<SparseLayout>,
    pub features: Var,
}

impl SparseFeatureMap {
    pub fn new(g: &Graph, layout: Rc<SparseLayout>, features: Var) -> Result<Self> {
        if g.shape(features).0 != layout.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} active cells",
                g.shape(features).0,
                layout.len()
            )));
        }
        Ok(Self { layout, features })
    }

    pub fn channels(&self, g: &Graph) -> usize {
        g.shape(self.features).1
    }

    pub fn values<'g>(&self, g: &'g Graph) -> &'g Mat {
        g.value(self.features)
    }

    fn with(&self, features: Var) -> Self {
        Self {
            layout: self.layout.clone(),
            features,
        }
    }
}

fn check_kernel(g: &Graph, input: &SparseFeatureMap, w: Var, offsets: usize) -> Result<()> {
    let cin = input.channels(g);
    if g.shape(w).0 != offsets * cin {
        return Err(Error::Shape(format!(
            "weights have {} rows, expected {} offsets × {} input channels",
            g.shape(w).0,
            offsets,
            cin
        )));
    }
    Ok(())
}

/// `k × k` convolution evaluated only on active cells; inactive neighbors contribute zero.
pub fn submanifold_conv(
    g: &mut Graph,
    input: &SparseFeatureMap,
    weights: Var,
    bias: Option<Var>,
    k: usize,
) -> Result<SparseFeatureMap> {
    let rules = input.layout.subm_rules(k)?;
    check_kernel(g, input, weights, k * k)?;
    let y = g.sparse_conv(input.features, weights, bias, rules)?;
    Ok(input.with(y))
}

/// 2×2 stride-2 convolution; output dims halve and coarse cells inherit activity from any child.
pub fn strided_sparse_conv(
    g: &mut Graph,
    input: &SparseFeatureMap,
    weights: Var,
    bias: Option<Var>,
) -> Result<SparseFeatureMap> {
    let coarse = Rc::new(input.layout.coarsened()?);
    check_kernel(g, input, weights, 4)?;
    let rules = input.layout.strided_rules(&coarse);
    let y = g.sparse_conv(input.features, weights, bias, rules)?;
    SparseFeatureMap::new(g, coarse, y)
}

/// Skip-connection merge: every skip cell gets `[skip feature | parent coarse feature or zeros]`.
pub fn upsample_concat(g: &mut Graph, coarse: &SparseFeatureMap, skip: &SparseFeatureMap) -> Result<SparseFeatureMap> {
    let (cl, sl) = (&coarse.layout, &skip.layout);
    if cl.height * 2 != sl.height || cl.width * 2 != sl.width {
        return Err(Error::Shape(format!(
            "coarse {}×{} is not half of skip {}×{}",
            cl.height, cl.width, sl.height, sl.width
        )));
    }
    let parent: Vec<Option<u32>> = sl
        .coords
        .iter()
        .map(|&(i, j)| cl.row_of((i / 2) as isize, (j / 2) as isize).map(|r| r as u32))
        .collect();
    let y = g.up_concat(coarse.features, skip.features, Rc::new(parent))?;
    Ok(skip.with(y))
}

/// Mean over the active cells of each `s × s` window.
pub fn sparse_avg_pool(g: &mut Graph, input: &SparseFeatureMap, s: usize) -> Result<SparseFeatureMap> {
    let mix = input.layout.avg_pool_mix(s)?;
    let y = g.row_mix(input.features, mix)?;
    Ok(input.with(y))
}

/// Element-wise activation or per-cell normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    L2Norm,
}

/// Per-cell vectors with norm at or below this are degenerate under L2 normalization.
pub const MIN_NORM: f64 = 1e-12;

pub fn pointwise(g: &mut Graph, input: &SparseFeatureMap, kind: Pointwise) -> Result<SparseFeatureMap> {
    let y = match kind {
        Pointwise::Relu => g.relu(input.features),
        Pointwise::Sigmoid => g.sigmoid(input.features),
        Pointwise::L2Norm => g.l2_norm_rows(input.features, MIN_NORM)?,
    };
    Ok(input.with(y))
}

/// Element-wise sum of two maps on the same layout.
pub fn add_maps(g: &mut Graph, a: &SparseFeatureMap, b: &SparseFeatureMap) -> Result<SparseFeatureMap> {
    if !Rc::ptr_eq(&a.layout, &b.layout) && a.layout.coords != b.layout.coords {
        return Err(Error::Shape("residual add across different active sets".into()));
    }
    let y = g.add(a.features, b.features)?;
    Ok(a.with(y))
}
