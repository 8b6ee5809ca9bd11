//! Property suites run by the `verify` command.

use std::rc::Rc;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{BevConfig, Extent, GridShape, RigidTransform};
use crate::config::RunConfig;
use crate::dataset;
use crate::heads;
use crate::losses::LossWeights;
use crate::model::{Model, ModelConfig};
use crate::nn::gradcheck::{check_params, GradCheckOptions, GradCheckReport};
use crate::nn::layers::{Attention, Mlp3};
use crate::nn::sparse::{add_maps, pointwise, sparse_avg_pool, upsample_concat};
use crate::nn::{tape, Conv, Graph, Mat, ParamStore, Pointwise, SparseFeatureMap, SparseLayout};
use crate::pipeline::{self, PairData, TrainConfig};
use crate::registration;
use crate::Result;

/// Relative tolerance of the finite-difference checks.
pub const GRAD_TOL: f64 = 1e-4;

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub module: &'static str,
    pub property: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteReport {
    fn new(module: &'static str, property: impl Into<String>, residual: f64, tolerance: f64, started: Instant) -> Self {
        Self {
            module,
            property: property.into(),
            residual,
            tolerance,
            passed: residual <= tolerance,
            seconds: started.elapsed().as_secs_f64(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}/{} residual={:.3e} tolerance={:.0e} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.property,
            self.residual,
            self.tolerance,
            self.seconds
        )
    }
}

fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn random_layout(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> SparseLayout {
    loop {
        let coords: Vec<(u32, u32)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i as u32, j as u32)))
            .filter(|_| r.random_bool(density))
            .collect();
        if !coords.is_empty() {
            return SparseLayout::new(h, w, coords).expect("valid coordinates");
        }
    }
}

/// Spatial saliency from the pooled operator against the neighborhood mean computed directly.
pub fn saliency_equivalence(maps: usize, seed: u64) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..maps {
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let c = r.random_range(1..=16);
        let window = [1, 3, 5][r.random_range(0..3)];
        let density = r.random_range(0.05..0.9);
        let layout = Rc::new(random_layout(&mut r, h, w, density));
        let feats = random_mat(&mut r, layout.len(), c);
        let mut g = Graph::new();
        let v = g.input(feats.clone());
        let d = SparseFeatureMap::new(&g, layout.clone(), v)?;
        let alpha = heads::spatial_saliency(&mut g, &d, window)?;
        let got = g.value(alpha.features);
        let rad = (window / 2) as isize;
        for (row, &(i, j)) in layout.coords().iter().enumerate() {
            let mut mean = vec![0.0; c];
            let mut n = 0.0;
            for di in -rad..=rad {
                for dj in -rad..=rad {
                    if let Some(o) = layout.row_of(i as isize + di, j as isize + dj) {
                        for (m, x) in mean.iter_mut().zip(feats.row(o)) {
                            *m += x;
                        }
                        n += 1.0;
                    }
                }
            }
            for k in 0..c {
                let want = tape::softplus(feats.get(row, k) - mean[k] / n);
                let a = got.get(row, k);
                worst = worst.max((a - want).abs() / want.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
    Ok(worst)
}

/// Worst rotation and translation residuals of Kabsch on noiseless random instances.
pub fn kabsch_exactness(instances: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut wr, mut wt): (f64, f64) = (0.0, 0.0);
    for _ in 0..instances {
        let n = r.random_range(3..=50);
        let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let t = Vector3::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(-5.0..5.0));
        let truth = RigidTransform::from_axis_angle(axis, r.random_range(-3.1..3.1), t);
        let q: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(r.random_range(-20.0..20.0), r.random_range(-20.0..20.0), r.random_range(-3.0..3.0)))
            .collect();
        let p: Vec<Vector3<f64>> = q.iter().map(|x| truth.apply(x)).collect();
        let est = registration::kabsch(&p, &q, None)?;
        wr = wr.max((est.rotation() - truth.rotation()).norm());
        wt = wt.max((est.translation() - truth.translation()).norm());
    }
    Ok((wr, wt))
}

fn dense_conv(layout: &SparseLayout, feats: &Mat, w: &Mat, b: &[f64], k: usize) -> Mat {
    let (cin, cout) = (feats.cols(), w.cols());
    let rad = (k / 2) as isize;
    let mut out = Mat::zeros(layout.len(), cout);
    for (row, &(i, j)) in layout.coords().iter().enumerate() {
        let y = out.row_mut(row);
        y.copy_from_slice(b);
        for di in -rad..=rad {
            for dj in -rad..=rad {
                let Some(src) = layout.row_of(i as isize + di, j as isize + dj) else { continue };
                let o = ((di + rad) as usize) * k + (dj + rad) as usize;
                for c in 0..cin {
                    let x = feats.get(src, c);
                    for (co, yv) in y.iter_mut().enumerate() {
                        *yv += x * w.get(o * cin + c, co);
                    }
                }
            }
        }
    }
    out
}

/// Submanifold convolution against a dense masked convolution.
pub fn conv_oracle(cases: usize, seed: u64) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let k = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(2..20), r.random_range(2..20));
        let layout = Rc::new(random_layout(&mut r, h, w, 0.4));
        let (cin, cout) = (r.random_range(1..6), r.random_range(1..6));
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "c", k, cin, cout, &mut r);
        let bias: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
        store.get_mut(conv.b).value = Mat::from_vec(1, cout, bias.clone());
        let feats = random_mat(&mut r, layout.len(), cin);
        let mut g = Graph::new();
        let v = g.input(feats.clone());
        let x = SparseFeatureMap::new(&g, layout.clone(), v)?;
        let y = conv.subm(&mut g, &store, &x)?;
        let want = dense_conv(&layout, &feats, &store.get(conv.w).value, &bias, k);
        for (a, b) in g.value(y.features).data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Gradient check of a chain through every sparse layer type.
pub fn layer_gradients(seed: u64) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let layout = Rc::new(random_layout(&mut r, 8, 8, 0.45));
    let mut store = ParamStore::new();
    let conv3 = Conv::new(&mut store, "c3", 3, 3, 4, &mut r);
    let down = Conv::new(&mut store, "down", 2, 4, 5, &mut r);
    let up = Conv::new(&mut store, "up", 3, 9, 3, &mut r);
    let feat = store.add("feat", random_mat(&mut r, layout.len(), 3));
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            p.value = random_mat(&mut r, 1, p.value.cols());
        }
    }
    let weights = random_mat(&mut r, layout.len(), 3);
    check_params(&mut store, None, GradCheckOptions::default(), |g, s| {
        let f = g.param(s, feat);
        let x = SparseFeatureMap::new(g, layout.clone(), f)?;
        let a = conv3.subm(g, s, &x)?;
        let a = pointwise(g, &a, Pointwise::Sigmoid)?;
        let c = down.strided(g, s, &a)?;
        let c = pointwise(g, &c, Pointwise::Relu)?;
        let u = upsample_concat(g, &c, &a)?;
        let y = up.subm(g, s, &u)?;
        let y = add_maps(g, &y, &x)?;
        let p = sparse_avg_pool(g, &y, 3)?;
        let n = pointwise(g, &p, Pointwise::L2Norm)?;
        let wv = g.input(weights.clone());
        let m = g.mul(n.features, wv)?;
        Ok(g.sum(m))
    })
}

/// Gradient check of cross attention feeding the shared MLP.
pub fn attention_gradients(seed: u64) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "att", 4, 3, &mut r);
    let mlp = Mlp3::new(&mut store, "mlp", [8, 6, 5, 4], &mut r);
    let q = store.add("q", random_mat(&mut r, 5, 4));
    let k = store.add("k", random_mat(&mut r, 4, 4));
    let target = random_mat(&mut r, 5, 4);
    check_params(&mut store, None, GradCheckOptions::default(), |g, s| {
        let (qv, kv) = (g.param(s, q), g.param(s, k));
        let (_, a) = att.forward(g, s, qv, kv, kv)?;
        let c = g.concat_cols(qv, a)?;
        let y = mlp.forward(g, s, c)?;
        let t = g.input(target.clone());
        let d = g.sub(y, t)?;
        let d2 = g.mul(d, d)?;
        g.mean(d2)
    })
}

/// A 16×16 desk scene pair with a small network for composed gradient checks. Biases are
/// drawn at random so that the check runs at a generic point of parameter space.
pub fn tiny_pair(seed: u64) -> Result<(Model, ParamStore, PairData)> {
    let bev = BevConfig::new(
        Extent {
            min: [-20.0, -20.0, -2.5],
            max: [20.0, 20.0, 3.5],
        },
        GridShape {
            rows: 16,
            cols: 16,
            layers: 6,
        },
        3,
    )?;
    let mc = ModelConfig {
        channels: vec![4, 6, 8],
        descriptor_dim: 16,
        attention_dim: 4,
        init_seed: seed,
    };
    let (model, mut store) = Model::new(mc, bev)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            let n = p.value.cols();
            p.value = Mat::from_vec(1, n, (0..n).map(|_| r.random_range(-0.1..0.1)).collect());
        }
    }
    let scene_cfg = dataset::SceneConfig::default();
    let scene = dataset::generate_scene(seed, &scene_cfg)?;
    let sensor = dataset::SensorConfig::default();
    let pair = dataset::make_pair(&scene, &scene_cfg, 4.0, seed, &dataset::PairConfig::default(), &sensor)?;
    let data = PairData::new(&model, &pair.p, &pair.q, pair.gt, pair.distance)?;
    Ok((model, store, data))
}

/// Gradient check of the composed model for one weighting of the loss terms.
pub fn composed_gradients(model: &Model, store: &mut ParamStore, data: &PairData, weights: LossWeights, max_entries: usize) -> Result<GradCheckReport> {
    let cfg = TrainConfig {
        anchors: 24,
        negatives: 8,
        weights,
        ..TrainConfig::default()
    };
    let opts = GradCheckOptions {
        max_entries: Some(max_entries),
        ..GradCheckOptions::default()
    };
    check_params(store, None, opts, |g, s| {
        let mut rng = pipeline::step_rng(cfg.seed, 0);
        Ok(pipeline::pair_loss(g, model, s, data, &cfg, &mut rng)?.0)
    })
}

fn single_term(k: usize) -> LossWeights {
    let mut w = [0.0; 5];
    w[k] = 1.0;
    LossWeights {
        desc: w[0],
        det: w[1],
        reg: w[2],
        bce: w[3],
        sg: w[4],
    }
}

/// Every suite; `conv_fault` flips the sign of one convolution gradient for the duration.
pub fn run_all(_cfg: &RunConfig, conv_fault: bool) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    let t = Instant::now();
    out.push(SuiteReport::new("heads", "pooled saliency equals direct", saliency_equivalence(100, 1)?, 1e-12, t));
    let t = Instant::now();
    let (rr, rt) = kabsch_exactness(1000, 2)?;
    out.push(SuiteReport::new("registration", "kabsch rotation residual", rr, 1e-9, t));
    out.push(SuiteReport::new("registration", "kabsch translation residual", rt, 1e-9, t));
    let t = Instant::now();
    out.push(SuiteReport::new("sparse_nn", "submanifold conv equals dense", conv_oracle(50, 3)?, 1e-10, t));

    tape::set_conv_grad_fault(conv_fault);
    let result = (|| -> Result<()> {
        let t = Instant::now();
        out.push(SuiteReport::new("sparse_nn", "layer gradients", layer_gradients(4)?.max_rel_error, GRAD_TOL, t));
        let t = Instant::now();
        out.push(SuiteReport::new("sparse_nn", "attention and mlp gradients", attention_gradients(5)?.max_rel_error, GRAD_TOL, t));
        let (model, mut store, data) = tiny_pair(6)?;
        for (k, name) in LossWeights::NAMES.iter().enumerate() {
            let t = Instant::now();
            let rep = composed_gradients(&model, &mut store, &data, single_term(k), 3)?;
            out.push(SuiteReport::new("losses", format!("{name} gradient through the model"), rep.max_rel_error, GRAD_TOL, t));
        }
        let t = Instant::now();
        let rep = composed_gradients(&model, &mut store, &data, LossWeights::default(), 3)?;
        out.push(SuiteReport::new("model", "composed 16x16 pair gradient", rep.max_rel_error, GRAD_TOL, t));
        Ok(())
    })();
    tape::set_conv_grad_fault(false);
    result?;
    Ok(out)
}
