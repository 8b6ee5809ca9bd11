//! Parameterised building blocks: linear, MLP, attention, sparse conv and residual blocks.

use rand::Rng;

use crate::error::{Error, Result};

use super::param::{ParamId, ParamStore};
use super::sparse::{self, SparseFeatureMap};
use super::tape::{Graph, Var};

/// Dense `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), din, dout, din, dout, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, dout);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

/// Three fully connected layers: linear → ReLU → linear → ReLU → linear.
#[derive(Debug, Clone, Copy)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 4], rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
                Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
                Linear::new(store, &format!("{name}.2"), dims[2], dims[3], rng),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.relu(h);
        self.layers[2].forward(g, store, h)
    }
}

/// Applies a three-layer MLP to a batch of row vectors.
pub fn mlp3(g: &mut Graph, store: &ParamStore, mlp: &Mlp3, input: Var) -> Result<Var> {
    mlp.forward(g, store, input)
}

/// Single-head scaled dot-product attention with learned query/key/value projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), din, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), din, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), din, din, rng),
            dim,
        }
    }

    /// Attention weights (`n_q × n_k`, rows sum to one) and attended values (`n_q × din`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        if g.shape(k).0 == 0 {
            return Err(Error::EmptyContext("attention over an empty key set"));
        }
        if g.shape(k).0 != g.shape(v).0 {
            return Err(Error::Shape(format!("{} keys vs {} values", g.shape(k).0, g.shape(v).0)));
        }
        let qp = self.query.forward(g, store, q)?;
        let kp = self.key.forward(g, store, k)?;
        let vp = self.value.forward(g, store, v)?;
        let logits = g.matmul_bt(qp, kp)?;
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax_rows(logits);
        let out = g.matmul(weights, vp)?;
        Ok((weights, out))
    }
}

/// Treats each active cell as a token; the output keeps the query map's active set.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    att: &Attention,
    query: &SparseFeatureMap,
    key: &SparseFeatureMap,
    value: &SparseFeatureMap,
) -> Result<SparseFeatureMap> {
    if key.layout.coords() != value.layout.coords() {
        return Err(Error::Shape("key and value maps must share an active set".into()));
    }
    let (_, out) = att.forward(g, store, query.features, key.features, value.features)?;
    SparseFeatureMap::new(g, query.layout.clone(), out)
}

/// Sparse convolution parameters; `k` odd for submanifold, `k = 2` for the strided form.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), k * k * cin, cout, k * k * cin, k * k * cout, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, cout);
        Self { w, b, k, cin, cout }
    }

    pub fn subm(&self, g: &mut Graph, store: &ParamStore, x: &SparseFeatureMap) -> Result<SparseFeatureMap> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        sparse::submanifold_conv(g, x, w, Some(b), self.k)
    }

    pub fn strided(&self, g: &mut Graph, store: &ParamStore, x: &SparseFeatureMap) -> Result<SparseFeatureMap> {
        debug_assert_eq!(self.k, 2);
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        sparse::strided_sparse_conv(g, x, w, Some(b))
    }
}

/// `relu(x + conv(relu(conv(x))))` with 3×3 submanifold convs.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub a: Conv,
    pub b: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Conv::new(store, &format!("{name}.a"), 3, c, c, rng),
            b: Conv::new(store, &format!("{name}.b"), 3, c, c, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: &SparseFeatureMap) -> Result<SparseFeatureMap> {
        let h = self.a.subm(g, store, x)?;
        let h = sparse::pointwise(g, &h, sparse::Pointwise::Relu)?;
        let h = self.b.subm(g, store, &h)?;
        let s = sparse::add_maps(g, x, &h)?;
        sparse::pointwise(g, &s, sparse::Pointwise::Relu)
    }
}
