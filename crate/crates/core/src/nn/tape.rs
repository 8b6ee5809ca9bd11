//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every forward operation together with its value.
//! [`Graph::backward`] walks the record in reverse and accumulates
//! gradients into the [`ParamStore`] that supplied the parameter leaves.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::mat::{gemm, Mat, Trans};
use super::param::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather-scatter plan of a sparse convolution: for every kernel offset,
/// the `(input row, output row)` pairs it connects.
#[derive(Debug, Clone)]
pub struct ConvRules {
    pub n_in: usize,
    pub n_out: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
    /// Offsets whose pairs are exactly `(r, r)` for every row.
    pub identity: Vec<bool>,
}

impl ConvRules {
    pub fn new(n_in: usize, n_out: usize, pairs: Vec<Vec<(u32, u32)>>) -> Self {
        let identity = pairs
            .iter()
            .map(|p| {
                n_in == n_out
                    && p.len() == n_out
                    && p.iter().enumerate().all(|(r, &(i, o))| i as usize == r && o as usize == r)
            })
            .collect();
        Self {
            n_in,
            n_out,
            pairs,
            identity,
        }
    }

    pub fn offsets(&self) -> usize {
        self.pairs.len()
    }
}

/// Sparse linear row operator: `out[o] += w · in[i]` for each entry.
#[derive(Debug, Clone)]
pub struct RowMix {
    pub n_in: usize,
    pub n_out: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

/// Per-anchor positive and negative index lists into a distance column.
#[derive(Debug, Clone, Default)]
pub struct CircleGroups {
    pub groups: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Margins and scale of the circle loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleParams {
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub circle_scale: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self {
            pos_margin: 0.1,
            neg_margin: 1.4,
            circle_scale: 10.0,
        }
    }
}

impl CircleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_margin > 0.0 && self.pos_margin < self.neg_margin) {
            return Err(Error::Config("circle margins must satisfy 0 < pos < neg".into()));
        }
        if !(self.circle_scale > 0.0) {
            return Err(Error::Config("circle_scale must be positive".into()));
        }
        Ok(())
    }

    /// Positive-pair logit `θ_p (d − Δ_p)` with weight `θ_p = scale·|d − Δ_p|`.
    pub fn pos_logit(&self, d: f64) -> (f64, f64) {
        let u = d - self.pos_margin;
        (self.circle_scale * u.abs() * u, 2.0 * self.circle_scale * u.abs())
    }

    /// Negative-pair logit `θ_n (Δ_n − d)` with weight `θ_n = scale·|Δ_n − d|`.
    pub fn neg_logit(&self, d: f64) -> (f64, f64) {
        let u = self.neg_margin - d;
        (self.circle_scale * u.abs() * u, -2.0 * self.circle_scale * u.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Abs,
    Affine { scale: f64, shift: f64 },
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Affine { scale, shift } => scale * x + shift,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Affine { scale, .. } => scale,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln Σ e^{x_i}`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Clamp applied inside BCE logarithms.
pub const BCE_CLAMP: f64 = 1e-12;

/// Added under the square root of row distances to keep the gradient finite at zero.
pub const DIST_EPS: f64 = 1e-12;

thread_local! {
    static CONV_GRAD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Flips the sign of sparse-conv weight gradients on the current thread.
/// Mutation fixture for the gradient suite; never enabled in normal runs.
#[doc(hidden)]
pub fn set_conv_grad_fault(on: bool) {
    CONV_GRAD_FAULT.with(|f| f.set(on));
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    SparseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        rules: Rc<ConvRules>,
    },
    RowMix {
        x: Var,
        mix: Rc<RowMix>,
    },
    UpConcat {
        coarse: Var,
        skip: Var,
        parent: Rc<Vec<Option<u32>>>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    L2NormRows(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRowBias(Var, Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    GatherRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    RowMax {
        x: Var,
        arg: Vec<usize>,
    },
    DivRows(Var, Var),
    RowDist(Var, Var),
    GroupMin {
        x: Var,
        arg: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        x: Var,
        labels: Rc<Vec<f64>>,
    },
    WeightedMean {
        w: Var,
        heights: Rc<Vec<Vec<(usize, f64)>>>,
    },
    Circle {
        d: Var,
        groups: Rc<CircleGroups>,
        params: CircleParams,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// Parameter leaf; one node per parameter per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Option<Var>, rules: Rc<ConvRules>) -> Result<Var> {
        let (n_in, cin) = self.shape(x);
        let (wr, cout) = self.shape(w);
        if n_in != rules.n_in {
            return Err(shape_err("conv input rows vs rulebook", (n_in, cin), (rules.n_in, 0)));
        }
        if wr != rules.offsets() * cin {
            return Err(shape_err("conv weight rows vs offsets×cin", (wr, cout), (rules.offsets() * cin, cout)));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, cout) {
                return Err(shape_err("conv bias", self.shape(b), (1, cout)));
            }
        }
        let mut out = Mat::zeros(rules.n_out, cout);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for (o, pairs) in rules.pairs.iter().enumerate() {
                if pairs.is_empty() {
                    continue;
                }
                let wo = &wv.data()[o * cin * cout..(o + 1) * cin * cout];
                if rules.identity[o] {
                    gemm(xv.data(), n_in, cin, Trans::N, wo, cin, cout, Trans::N, out.data_mut(), 1.0);
                    continue;
                }
                let g = xv.gather_rows(pairs.iter().map(|p| p.0 as usize));
                let mut y = vec![0.0; pairs.len() * cout];
                gemm(g.data(), pairs.len(), cin, Trans::N, wo, cin, cout, Trans::N, &mut y, 0.0);
                for (r, &(_, orow)) in pairs.iter().enumerate() {
                    let dst = out.row_mut(orow as usize);
                    for (d, s) in dst.iter_mut().zip(&y[r * cout..(r + 1) * cout]) {
                        *d += s;
                    }
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data().to_vec();
                for r in 0..rules.n_out {
                    for (d, s) in out.row_mut(r).iter_mut().zip(&bv) {
                        *d += s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::SparseConv { x, w, b, rules }))
    }

    pub fn row_mix(&mut self, x: Var, mix: Rc<RowMix>) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n != mix.n_in {
            return Err(shape_err("row mix input", (n, c), (mix.n_in, c)));
        }
        let mut out = Mat::zeros(mix.n_out, c);
        let xv = self.value(x);
        for &(o, i, w) in &mix.entries {
            let src = xv.row(i as usize);
            for (d, s) in out.row_mut(o as usize).iter_mut().zip(src) {
                *d += w * s;
            }
        }
        Ok(self.push(out, Op::RowMix { x, mix }))
    }

    pub fn up_concat(&mut self, coarse: Var, skip: Var, parent: Rc<Vec<Option<u32>>>) -> Result<Var> {
        let (ns, cs) = self.shape(skip);
        let (nc, cc) = self.shape(coarse);
        if parent.len() != ns {
            return Err(shape_err("upsample parent map", (parent.len(), 0), (ns, cs)));
        }
        let mut out = Mat::zeros(ns, cs + cc);
        let (sv, cv) = (self.value(skip), self.value(coarse));
        for r in 0..ns {
            let row = out.row_mut(r);
            row[..cs].copy_from_slice(sv.row(r));
            if let Some(p) = parent[r] {
                if p as usize >= nc {
                    return Err(Error::Shape(format!("parent row {p} out of range {nc}")));
                }
                row[cs..].copy_from_slice(cv.row(p as usize));
            }
        }
        Ok(self.push(out, Op::UpConcat { coarse, skip, parent }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x).map(|t| f.apply(t));
        self.push(v, Op::Unary(x, f))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.unary(x, Unary::Affine { scale, shift: 0.0 })
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Unary::Affine { scale, shift })
    }

    /// Divides each row by its Euclidean norm; rows with norm ≤ `min_norm` are an error.
    pub fn l2_norm_rows(&mut self, x: Var, min_norm: f64) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > min_norm) {
                return Err(Error::DegenerateFeature(format!("row {r} has norm {n:e}")));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(out, Op::L2NormRows(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ar, ac), (br, bc)) = (self.shape(a), self.shape(b));
        if ac != br {
            return Err(shape_err("matmul", (ar, ac), (br, bc)));
        }
        let mut out = Mat::zeros(ar, bc);
        gemm(self.value(a).data(), ar, ac, Trans::N, self.value(b).data(), br, bc, Trans::N, out.data_mut(), 0.0);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ar, ac), (br, bc)) = (self.shape(a), self.shape(b));
        if ac != bc {
            return Err(shape_err("matmul_bt", (ar, ac), (br, bc)));
        }
        let mut out = Mat::zeros(ar, br);
        gemm(self.value(a).data(), ar, ac, Trans::N, self.value(b).data(), br, bc, Trans::T, out.data_mut(), 0.0);
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let ((xr, xc), bs) = (self.shape(x), self.shape(b));
        if bs != (1, xc) {
            return Err(shape_err("row bias", (xr, xc), bs));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for r in 0..xr {
            for (d, s) in out.row_mut(r).iter_mut().zip(&bv) {
                *d += s;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, b)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ar, ac), (br, bc)) = (self.shape(a), self.shape(b));
        if ar != br {
            return Err(shape_err("concat_cols", (ar, ac), (br, bc)));
        }
        let mut out = Mat::zeros(ar, ac + bc);
        for r in 0..ar {
            let row = out.row_mut(r);
            row[..ac].copy_from_slice(self.nodes[a.0].value.row(r));
            row[ac..].copy_from_slice(self.nodes[b.0].value.row(r));
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let n = self.shape(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of {n} rows")));
        }
        let out = self.value(x).gather_rows(idx.iter().copied());
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    /// Per-row maximum as an `n × 1` column; ties resolve to the first column.
    pub fn row_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut arg = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > bv {
                    bi = c;
                    bv = v;
                }
            }
            arg.push(bi);
            out.push(bv);
        }
        self.push(Mat::column(out), Op::RowMax { x, arg })
    }

    /// `a[r, :] / m[r]` for an `n × 1` column `m`.
    pub fn div_rows(&mut self, a: Var, m: Var) -> Result<Var> {
        let ((ar, ac), ms) = (self.shape(a), self.shape(m));
        if ms != (ar, 1) {
            return Err(shape_err("div_rows", (ar, ac), ms));
        }
        let mut out = self.value(a).clone();
        for r in 0..ar {
            let d = self.nodes[m.0].value.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v /= d);
        }
        Ok(self.push(out, Op::DivRows(a, m)))
    }

    /// Row-wise `sqrt(‖a_r − b_r‖² + DIST_EPS)` as an `n × 1` column.
    pub fn row_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dist")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..av.rows())
            .map(|r| {
                let s: f64 = av.row(r).iter().zip(bv.row(r)).map(|(x, y)| (x - y) * (x - y)).sum();
                (s + DIST_EPS).sqrt()
            })
            .collect();
        Ok(self.push(Mat::column(out), Op::RowDist(a, b)))
    }

    /// Minimum of each index group of an `n × 1` column.
    pub fn group_min(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(shape_err("group_min expects a column", xv.shape(), (xv.rows(), 1)));
        }
        let mut arg = Vec::with_capacity(groups.len());
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut best: Option<(usize, f64)> = None;
            for &i in g {
                let v = *xv.data().get(i).ok_or_else(|| Error::Shape(format!("group index {i} out of range")))?;
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((i, v));
                }
            }
            let (i, v) = best.ok_or_else(|| Error::SamplingContract("empty group in group_min".into()))?;
            arg.push(i);
            out.push(v);
        }
        Ok(self.push(Mat::column(out), Op::GroupMin { x, arg }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Mat::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyInput("mean of an empty tensor"));
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Mat::scalar(s), Op::Mean(x)))
    }

    /// Element-wise binary cross entropy against fixed labels, logs clamped at [`BCE_CLAMP`].
    pub fn bce(&mut self, x: Var, labels: Rc<Vec<f64>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != labels.len() {
            return Err(shape_err("bce labels", xv.shape(), (labels.len(), 1)));
        }
        let data = xv
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&p, &l)| -(l * p.max(BCE_CLAMP).ln() + (1.0 - l) * (1.0 - p).max(BCE_CLAMP).ln()))
            .collect();
        let out = Mat::from_vec(xv.rows(), xv.cols(), data);
        Ok(self.push(out, Op::Bce { x, labels }))
    }

    /// Per-row `Σ_k w_k h_k / Σ_k w_k` over the listed `(column, height)` entries.
    pub fn weighted_mean(&mut self, w: Var, heights: Rc<Vec<Vec<(usize, f64)>>>) -> Result<Var> {
        let wv = self.value(w);
        if wv.rows() != heights.len() {
            return Err(shape_err("weighted_mean rows", wv.shape(), (heights.len(), 0)));
        }
        let mut out = Vec::with_capacity(wv.rows());
        for (r, hs) in heights.iter().enumerate() {
            if hs.is_empty() {
                return Err(Error::Consistency(format!("empty pillar at active row {r}")));
            }
            let row = wv.row(r);
            let (mut num, mut den) = (0.0, 0.0);
            for &(k, h) in hs {
                num += row[k] * h;
                den += row[k];
            }
            out.push(num / den);
        }
        Ok(self.push(Mat::column(out), Op::WeightedMean { w, heights }))
    }

    /// Mean over anchors of `softplus(lse_p + lse_n)` on a distance column.
    pub fn circle(&mut self, d: Var, groups: Rc<CircleGroups>, params: CircleParams) -> Result<Var> {
        let dv = self.value(d).data();
        if groups.groups.is_empty() {
            return Err(Error::SamplingContract("circle loss needs at least one anchor".into()));
        }
        let mut total = 0.0;
        for (a, (pos, neg)) in groups.groups.iter().enumerate() {
            if pos.is_empty() || neg.is_empty() {
                return Err(Error::SamplingContract(format!("anchor {a} has an empty positive or negative set")));
            }
            if pos.iter().chain(neg).any(|&i| i >= dv.len()) {
                return Err(Error::Shape(format!("anchor {a} indexes past the distance column")));
            }
            let lp = log_sum_exp(pos.iter().map(|&i| params.pos_logit(dv[i]).0));
            let ln = log_sum_exp(neg.iter().map(|&i| params.neg_logit(dv[i]).0));
            total += softplus(lp + ln);
        }
        let v = total / groups.groups.len() as f64;
        Ok(self.push(Mat::scalar(v), Op::Circle { d, groups, params }))
    }

    /// Accumulates `∂loss/∂θ` into `store` for every parameter leaf.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Gradient of a scalar node with respect to every node; `None` where unreachable.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Mat>>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("loss node {} not on this tape", loss.0)));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tape(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        grads.resize(self.nodes.len(), None);
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, gy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Mat)| {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let (r, c) = self.nodes[v.0].value.shape();
                *slot = Some(Mat::zeros(r, c));
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::SparseConv { x, w, b, rules } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n_in, cin) = xv.shape();
                let cout = wv.cols();
                let mut dx = Mat::zeros(n_in, cin);
                let mut dw = Mat::zeros(wv.rows(), cout);
                for (o, pairs) in rules.pairs.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let wo = &wv.data()[o * cin * cout..(o + 1) * cin * cout];
                    let dwo = &mut dw.data_mut()[o * cin * cout..(o + 1) * cin * cout];
                    if rules.identity[o] {
                        gemm(xv.data(), n_in, cin, Trans::T, gy.data(), n_in, cout, Trans::N, dwo, 1.0);
                        gemm(gy.data(), n_in, cout, Trans::N, wo, cin, cout, Trans::T, dx.data_mut(), 1.0);
                        continue;
                    }
                    let n = pairs.len();
                    let g = xv.gather_rows(pairs.iter().map(|p| p.0 as usize));
                    let dyg = gy.gather_rows(pairs.iter().map(|p| p.1 as usize));
                    gemm(g.data(), n, cin, Trans::T, dyg.data(), n, cout, Trans::N, dwo, 1.0);
                    let mut dg = vec![0.0; n * cin];
                    gemm(dyg.data(), n, cout, Trans::N, wo, cin, cout, Trans::T, &mut dg, 0.0);
                    for (r, &(irow, _)) in pairs.iter().enumerate() {
                        for (d, s) in dx.row_mut(irow as usize).iter_mut().zip(&dg[r * cin..(r + 1) * cin]) {
                            *d += s;
                        }
                    }
                }
                if CONV_GRAD_FAULT.with(|f| f.get()) {
                    dw.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                acc(*x, &mut |g| g.add_assign(&dx));
                acc(*w, &mut |g| g.add_assign(&dw));
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for r in 0..gy.rows() {
                            for (d, s) in g.data_mut().iter_mut().zip(gy.row(r)) {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::RowMix { x, mix } => acc(*x, &mut |g| {
                for &(o, inr, w) in &mix.entries {
                    let src = gy.row(o as usize);
                    for (d, s) in g.row_mut(inr as usize).iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }),
            Op::UpConcat { coarse, skip, parent } => {
                let cs = val(*skip).cols();
                acc(*skip, &mut |g| {
                    for r in 0..gy.rows() {
                        for (d, s) in g.row_mut(r).iter_mut().zip(&gy.row(r)[..cs]) {
                            *d += s;
                        }
                    }
                });
                acc(*coarse, &mut |g| {
                    for (r, p) in parent.iter().enumerate() {
                        if let Some(p) = p {
                            for (d, s) in g.row_mut(*p as usize).iter_mut().zip(&gy.row(r)[cs..]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.add_assign(gy));
                acc(*b, &mut |g| g.add_assign(gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.add_assign(gy));
                acc(*b, &mut |g| {
                    for (d, s) in g.data_mut().iter_mut().zip(gy.data()) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((d, s), y) in g.data_mut().iter_mut().zip(gy.data()).zip(bv.data()) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((d, s), y) in g.data_mut().iter_mut().zip(gy.data()).zip(av.data()) {
                        *d += s * y;
                    }
                });
            }
            Op::Unary(x, f) => {
                let xv = val(*x);
                let yv = &node.value;
                acc(*x, &mut |g| {
                    for (((d, s), &xx), &yy) in g.data_mut().iter_mut().zip(gy.data()).zip(xv.data()).zip(yv.data()) {
                        *d += s * f.derivative(xx, yy);
                    }
                });
            }
            Op::L2NormRows(x) => {
                let (xv, yv) = (val(*x), &node.value);
                acc(*x, &mut |g| {
                    for r in 0..xv.rows() {
                        let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (y, dy) = (yv.row(r), gy.row(r));
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for ((d, &yy), &dd) in g.row_mut(r).iter_mut().zip(y).zip(dy) {
                            *d += (dd - yy * dot) / n;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    gemm(gy.data(), gy.rows(), gy.cols(), Trans::N, bv.data(), bv.rows(), bv.cols(), Trans::T, g.data_mut(), 1.0)
                });
                acc(*b, &mut |g| {
                    gemm(av.data(), av.rows(), av.cols(), Trans::T, gy.data(), gy.rows(), gy.cols(), Trans::N, g.data_mut(), 1.0)
                });
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    gemm(gy.data(), gy.rows(), gy.cols(), Trans::N, bv.data(), bv.rows(), bv.cols(), Trans::N, g.data_mut(), 1.0)
                });
                acc(*b, &mut |g| {
                    gemm(gy.data(), gy.rows(), gy.cols(), Trans::T, av.data(), av.rows(), av.cols(), Trans::N, g.data_mut(), 1.0)
                });
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |g| g.add_assign(gy));
                acc(*b, &mut |g| {
                    for r in 0..gy.rows() {
                        for (d, s) in g.data_mut().iter_mut().zip(gy.row(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let yv = &node.value;
                acc(*x, &mut |g| {
                    for r in 0..yv.rows() {
                        let (y, dy) = (yv.row(r), gy.row(r));
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for ((d, &yy), &dd) in g.row_mut(r).iter_mut().zip(y).zip(dy) {
                            *d += yy * (dd - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ac = val(*a).cols();
                acc(*a, &mut |g| {
                    for r in 0..gy.rows() {
                        for (d, s) in g.row_mut(r).iter_mut().zip(&gy.row(r)[..ac]) {
                            *d += s;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for r in 0..gy.rows() {
                        for (d, s) in g.row_mut(r).iter_mut().zip(&gy.row(r)[ac..]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => acc(*x, &mut |g| {
                for (r, &src) in idx.iter().enumerate() {
                    for (d, s) in g.row_mut(src).iter_mut().zip(gy.row(r)) {
                        *d += s;
                    }
                }
            }),
            Op::RowMax { x, arg } => acc(*x, &mut |g| {
                for (r, &c) in arg.iter().enumerate() {
                    let cols = g.cols();
                    g.data_mut()[r * cols + c] += gy.get(r, 0);
                }
            }),
            Op::DivRows(a, m) => {
                let (av, mv) = (val(*a), val(*m));
                acc(*a, &mut |g| {
                    for r in 0..av.rows() {
                        let inv = 1.0 / mv.get(r, 0);
                        for (d, s) in g.row_mut(r).iter_mut().zip(gy.row(r)) {
                            *d += s * inv;
                        }
                    }
                });
                acc(*m, &mut |g| {
                    for r in 0..av.rows() {
                        let mm = mv.get(r, 0);
                        let s: f64 = av.row(r).iter().zip(gy.row(r)).map(|(x, d)| x * d).sum();
                        g.data_mut()[r] -= s / (mm * mm);
                    }
                });
            }
            Op::RowDist(a, b) => {
                let (av, bv, dv) = (val(*a), val(*b), &node.value);
                let mut ga = Mat::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let k = gy.get(r, 0) / dv.get(r, 0);
                    for ((d, x), y) in ga.row_mut(r).iter_mut().zip(av.row(r)).zip(bv.row(r)) {
                        *d = k * (x - y);
                    }
                }
                acc(*a, &mut |g| g.add_assign(&ga));
                acc(*b, &mut |g| {
                    for (d, s) in g.data_mut().iter_mut().zip(ga.data()) {
                        *d -= s;
                    }
                });
            }
            Op::GroupMin { x, arg } => acc(*x, &mut |g| {
                for (r, &i) in arg.iter().enumerate() {
                    g.data_mut()[i] += gy.get(r, 0);
                }
            }),
            Op::Sum(x) => {
                let s = gy.item();
                acc(*x, &mut |g| g.data_mut().iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(x) => {
                let s = gy.item() / val(*x).len() as f64;
                acc(*x, &mut |g| g.data_mut().iter_mut().for_each(|d| *d += s));
            }
            Op::Bce { x, labels } => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for (((d, s), &p), &l) in g.data_mut().iter_mut().zip(gy.data()).zip(xv.data()).zip(labels.iter()) {
                        let mut dp = 0.0;
                        if p > BCE_CLAMP {
                            dp -= l / p;
                        }
                        if 1.0 - p > BCE_CLAMP {
                            dp += (1.0 - l) / (1.0 - p);
                        }
                        *d += s * dp;
                    }
                });
            }
            Op::WeightedMean { w, heights } => {
                let (wv, zv) = (val(*w), &node.value);
                acc(*w, &mut |g| {
                    for (r, hs) in heights.iter().enumerate() {
                        let row = wv.row(r);
                        let den: f64 = hs.iter().map(|&(k, _)| row[k]).sum();
                        let (z, s) = (zv.get(r, 0), gy.get(r, 0));
                        let grow = g.row_mut(r);
                        for &(k, h) in hs {
                            grow[k] += s * (h - z) / den;
                        }
                    }
                });
            }
            Op::Circle { d, groups, params } => {
                let dv = val(*d).data();
                let scale = gy.item() / groups.groups.len() as f64;
                acc(*d, &mut |g| {
                    let gd = g.data_mut();
                    for (pos, neg) in &groups.groups {
                        let lp: Vec<(f64, f64)> = pos.iter().map(|&i| params.pos_logit(dv[i])).collect();
                        let ln: Vec<(f64, f64)> = neg.iter().map(|&i| params.neg_logit(dv[i])).collect();
                        let lse_p = log_sum_exp(lp.iter().map(|v| v.0));
                        let lse_n = log_sum_exp(ln.iter().map(|v| v.0));
                        let outer = scale * sigmoid(lse_p + lse_n);
                        for (&i, &(l, dl)) in pos.iter().zip(&lp) {
                            gd[i] += outer * (l - lse_p).exp() * dl;
                        }
                        for (&i, &(l, dl)) in neg.iter().zip(&ln) {
                            gd[i] += outer * (l - lse_n).exp() * dl;
                        }
                    }
                });
            }
        }
    }
}
