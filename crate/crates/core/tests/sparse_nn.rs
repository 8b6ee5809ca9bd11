//! Sparse layers against dense oracles, plus per-layer gradient checks.

use std::rc::Rc;

use bevnet::nn::gradcheck::{check_params, GradCheckOptions};
use bevnet::nn::layers::{Attention, Linear, Mlp3};
use bevnet::nn::sparse::{add_maps, pointwise, sparse_avg_pool, strided_sparse_conv, submanifold_conv, upsample_concat};
use bevnet::nn::{Graph, Mat, ParamStore, Pointwise, SparseFeatureMap, SparseLayout};
use bevnet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_coords(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Vec<(u32, u32)> {
    let mut c = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if r.random_bool(density) {
                c.push((i as u32, j as u32));
            }
        }
    }
    c
}

fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn input_map(g: &mut Graph, h: usize, w: usize, coords: Vec<(u32, u32)>, feats: Mat) -> SparseFeatureMap {
    let layout = Rc::new(SparseLayout::new(h, w, coords).unwrap());
    let v = g.input(feats);
    SparseFeatureMap::new(g, layout, v).unwrap()
}

/// Dense grid `[i][j] -> feature` with zeros on inactive cells.
fn densify(h: usize, w: usize, coords: &[(u32, u32)], feats: &Mat) -> Vec<Vec<Vec<f64>>> {
    let mut d = vec![vec![vec![0.0; feats.cols()]; w]; h];
    for (r, &(i, j)) in coords.iter().enumerate() {
        d[i as usize][j as usize] = feats.row(r).to_vec();
    }
    d
}

fn dense_conv_oracle(h: usize, w: usize, coords: &[(u32, u32)], feats: &Mat, wts: &Mat, bias: &[f64], k: usize) -> Vec<Vec<f64>> {
    let x = densify(h, w, coords, feats);
    let (cin, cout) = (feats.cols(), wts.cols());
    let r = (k / 2) as isize;
    coords
        .iter()
        .map(|&(i, j)| {
            let mut y = bias.to_vec();
            for di in -r..=r {
                for dj in -r..=r {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    let o = ((di + r) as usize) * k + (dj + r) as usize;
                    for c in 0..cin {
                        for co in 0..cout {
                            y[co] += x[ii as usize][jj as usize][c] * wts.get(o * cin + c, co);
                        }
                    }
                }
            }
            y
        })
        .collect()
}

fn assert_rows_close(got: &Mat, want: &[Vec<f64>], tol: f64) {
    assert_eq!(got.rows(), want.len());
    for (r, w) in want.iter().enumerate() {
        for (a, b) in got.row(r).iter().zip(w) {
            assert!((a - b).abs() <= tol, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn identity_one_by_one_kernel() {
    let mut r = rng(1);
    let mut g = Graph::new();
    let coords = random_coords(&mut r, 6, 6, 0.4);
    let feats = random_mat(&mut r, coords.len(), 3);
    let x = input_map(&mut g, 6, 6, coords, feats.clone());
    let mut eye = Mat::zeros(3, 3);
    (0..3).for_each(|i| eye.set(i, i, 1.0));
    let w = g.input(eye);
    let b = g.input(Mat::zeros(1, 3));
    let y = submanifold_conv(&mut g, &x, w, Some(b), 1).unwrap();
    assert_eq!(y.values(&g), &feats);
}

#[test]
fn isolated_cell_sees_only_center_tap() {
    let mut r = rng(2);
    let mut g = Graph::new();
    let feats = random_mat(&mut r, 1, 2);
    let x = input_map(&mut g, 5, 5, vec![(2, 2)], feats.clone());
    let wts = random_mat(&mut r, 9 * 2, 3);
    let bias = random_mat(&mut r, 1, 3);
    let (w, b) = (g.input(wts.clone()), g.input(bias.clone()));
    let y = submanifold_conv(&mut g, &x, w, Some(b), 3).unwrap();
    for co in 0..3 {
        let want = feats.get(0, 0) * wts.get(4 * 2, co) + feats.get(0, 1) * wts.get(4 * 2 + 1, co) + bias.get(0, co);
        assert!((y.values(&g).get(0, co) - want).abs() < 1e-14);
    }
}

#[test]
fn submanifold_matches_dense_oracle() {
    for (seed, k) in [(3u64, 1usize), (4, 3), (5, 5)] {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let coords = random_coords(&mut r, 8, 8, 0.5);
        let feats = random_mat(&mut r, coords.len(), 4);
        let wts = random_mat(&mut r, k * k * 4, 5);
        let bias = random_mat(&mut r, 1, 5);
        let x = input_map(&mut g, 8, 8, coords.clone(), feats.clone());
        let (w, b) = (g.input(wts.clone()), g.input(bias.clone()));
        let y = submanifold_conv(&mut g, &x, w, Some(b), k).unwrap();
        assert_eq!(y.layout.coords(), x.layout.coords());
        let want = dense_conv_oracle(8, 8, &coords, &feats, &wts, bias.data(), k);
        assert_rows_close(y.values(&g), &want, 1e-10);
    }
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut g = Graph::new();
    let x = input_map(&mut g, 4, 4, vec![(0, 0)], Mat::zeros(1, 3));
    let w = g.input(Mat::zeros(9 * 2, 4));
    assert!(matches!(submanifold_conv(&mut g, &x, w, None, 3), Err(Error::Shape(_))));
}

#[test]
fn strided_conv_cases() {
    let mut g = Graph::new();
    let empty = input_map(&mut g, 4, 4, vec![], Mat::zeros(0, 2));
    let w = g.input(Mat::zeros(4 * 2, 3));
    let y = strided_sparse_conv(&mut g, &empty, w, None).unwrap();
    assert!(y.layout.is_empty());
    assert_eq!((y.layout.height(), y.layout.width()), (2, 2));

    let one = input_map(&mut g, 8, 8, vec![(5, 2)], Mat::from_vec(1, 2, vec![1.0, 2.0]));
    let y = strided_sparse_conv(&mut g, &one, w, None).unwrap();
    assert_eq!(y.layout.coords(), &[(2, 1)]);

    let odd = input_map(&mut g, 5, 4, vec![(0, 0)], Mat::zeros(1, 2));
    assert!(matches!(strided_sparse_conv(&mut g, &odd, w, None), Err(Error::Shape(_))));
}

#[test]
fn strided_conv_matches_dense_oracle() {
    let mut r = rng(6);
    let mut g = Graph::new();
    let coords = random_coords(&mut r, 8, 8, 0.3);
    let feats = random_mat(&mut r, coords.len(), 3);
    let wts = random_mat(&mut r, 4 * 3, 4);
    let bias = random_mat(&mut r, 1, 4);
    let x = input_map(&mut g, 8, 8, coords.clone(), feats.clone());
    let (w, b) = (g.input(wts.clone()), g.input(bias.clone()));
    let y = strided_sparse_conv(&mut g, &x, w, Some(b)).unwrap();
    let dense = densify(8, 8, &coords, &feats);
    let mut want_coords = Vec::new();
    let mut want = Vec::new();
    for ci in 0..4 {
        for cj in 0..4 {
            let children = [(0, 0), (0, 1), (1, 0), (1, 1)];
            if !children.iter().any(|&(a, b)| coords.contains(&((2 * ci + a) as u32, (2 * cj + b) as u32))) {
                continue;
            }
            want_coords.push((ci as u32, cj as u32));
            let mut v = bias.data().to_vec();
            for (o, &(a, b)) in children.iter().enumerate() {
                for c in 0..3 {
                    for co in 0..4 {
                        v[co] += dense[2 * ci + a][2 * cj + b][c] * wts.get(o * 3 + c, co);
                    }
                }
            }
            want.push(v);
        }
    }
    assert_eq!(y.layout.coords(), want_coords.as_slice());
    assert_rows_close(y.values(&g), &want, 1e-10);
}

#[test]
fn upsample_concat_cases() {
    let mut r = rng(7);
    let mut g = Graph::new();
    let coarse = input_map(&mut g, 2, 2, vec![(0, 0)], Mat::from_vec(1, 2, vec![5.0, 6.0]));
    let skip_empty = input_map(&mut g, 4, 4, vec![], Mat::zeros(0, 3));
    let y = upsample_concat(&mut g, &coarse, &skip_empty).unwrap();
    assert!(y.layout.is_empty());

    let skip = input_map(&mut g, 4, 4, vec![(3, 3)], Mat::from_vec(1, 1, vec![1.0]));
    let y = upsample_concat(&mut g, &coarse, &skip).unwrap();
    assert_eq!(y.values(&g).row(0), &[1.0, 0.0, 0.0]);

    let bad = input_map(&mut g, 6, 4, vec![], Mat::zeros(0, 1));
    assert!(matches!(upsample_concat(&mut g, &coarse, &bad), Err(Error::Shape(_))));

    let cc = random_coords(&mut r, 4, 4, 0.5);
    let cf = random_mat(&mut r, cc.len(), 2);
    let sc = random_coords(&mut r, 8, 8, 0.5);
    let sf = random_mat(&mut r, sc.len(), 3);
    let coarse = input_map(&mut g, 4, 4, cc.clone(), cf.clone());
    let skip = input_map(&mut g, 8, 8, sc.clone(), sf.clone());
    let y = upsample_concat(&mut g, &coarse, &skip).unwrap();
    assert_eq!(y.layout.coords(), sc.as_slice());
    for (r, &(i, j)) in sc.iter().enumerate() {
        let mut want = sf.row(r).to_vec();
        match cc.iter().position(|&c| c == (i / 2, j / 2)) {
            Some(p) => want.extend_from_slice(cf.row(p)),
            None => want.extend_from_slice(&[0.0, 0.0]),
        }
        assert_eq!(y.values(&g).row(r), want.as_slice());
    }
}

#[test]
fn avg_pool_cases() {
    let mut r = rng(8);
    let mut g = Graph::new();
    let single = input_map(&mut g, 5, 5, vec![(1, 3)], Mat::from_vec(1, 2, vec![0.3, -0.7]));
    let y = sparse_avg_pool(&mut g, &single, 3).unwrap();
    assert_eq!(y.values(&g).row(0), &[0.3, -0.7]);

    let coords = random_coords(&mut r, 6, 6, 0.6);
    let uniform = Mat::from_vec(coords.len(), 2, [0.25, -1.5].repeat(coords.len()));
    let x = input_map(&mut g, 6, 6, coords, uniform.clone());
    let y = sparse_avg_pool(&mut g, &x, 5).unwrap();
    assert_rows_close(y.values(&g), &(0..uniform.rows()).map(|_| vec![0.25, -1.5]).collect::<Vec<_>>(), 1e-15);

    let coords = random_coords(&mut r, 9, 7, 0.5);
    let feats = random_mat(&mut r, coords.len(), 3);
    let x = input_map(&mut g, 9, 7, coords.clone(), feats.clone());
    let y = sparse_avg_pool(&mut g, &x, 3).unwrap();
    let want: Vec<Vec<f64>> = coords
        .iter()
        .map(|&(i, j)| {
            let nb: Vec<usize> = coords
                .iter()
                .enumerate()
                .filter(|(_, &(a, b))| (a as i64 - i as i64).abs() <= 1 && (b as i64 - j as i64).abs() <= 1)
                .map(|(r, _)| r)
                .collect();
            (0..3).map(|c| nb.iter().map(|&r| feats.get(r, c)).sum::<f64>() / nb.len() as f64).collect()
        })
        .collect();
    assert_rows_close(y.values(&g), &want, 1e-12);
}

#[test]
fn pointwise_cases() {
    let mut g = Graph::new();
    let x = input_map(&mut g, 2, 2, vec![(0, 0), (1, 1)], Mat::from_vec(2, 2, vec![0.0, 0.0, 3.0, 4.0]));
    let s = pointwise(&mut g, &x, Pointwise::Sigmoid).unwrap();
    assert_eq!(s.values(&g).row(0), &[0.5, 0.5]);
    let mixed = input_map(&mut g, 1, 1, vec![(0, 0)], Mat::from_vec(1, 4, vec![-2.0, 0.0, 1.5, -1e-9]));
    let r = pointwise(&mut g, &mixed, Pointwise::Relu).unwrap();
    let want: Vec<f64> = [-2.0f64, 0.0, 1.5, -1e-9].iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    assert_eq!(r.values(&g).row(0), want.as_slice());
    assert!(matches!(pointwise(&mut g, &x, Pointwise::L2Norm), Err(Error::DegenerateFeature(_))));
    let y = input_map(&mut g, 1, 1, vec![(0, 0)], Mat::from_vec(1, 2, vec![3.0, 4.0]));
    let n = pointwise(&mut g, &y, Pointwise::L2Norm).unwrap();
    assert!((n.values(&g).get(0, 0) - 0.6).abs() < 1e-15);
    assert!((n.values(&g).get(0, 1) - 0.8).abs() < 1e-15);
}

fn dense_attention_oracle(q: &Mat, k: &Mat, v: &Mat, store: &ParamStore, att: &Attention) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let proj = |x: &Mat, l: &Linear| -> Vec<Vec<f64>> {
        let (w, b) = (&store.get(l.w).value, &store.get(l.b).value);
        (0..x.rows())
            .map(|r| (0..w.cols()).map(|c| b.get(0, c) + (0..x.cols()).map(|i| x.get(r, i) * w.get(i, c)).sum::<f64>()).collect())
            .collect()
    };
    let (qp, kp, vp) = (proj(q, &att.query), proj(k, &att.key), proj(v, &att.value));
    let scale = 1.0 / (att.dim as f64).sqrt();
    let mut weights = Vec::new();
    let mut outs = Vec::new();
    for qr in &qp {
        let logits: Vec<f64> = kp.iter().map(|kr| scale * qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / s).collect();
        let o = (0..vp[0].len()).map(|c| w.iter().zip(&vp).map(|(a, vr)| a * vr[c]).sum()).collect();
        weights.push(w);
        outs.push(o);
    }
    (weights, outs)
}

#[test]
fn attention_cases() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "att", 3, 4, &mut r);

    // singleton softmax
    let mut g = Graph::new();
    let q = g.input(random_mat(&mut r, 1, 3));
    let kv = random_mat(&mut r, 1, 3);
    let k = g.input(kv.clone());
    let (w, out) = att.forward(&mut g, &store, q, k, k).unwrap();
    assert!((g.value(w).item() - 1.0).abs() < 1e-15);
    let vp = dense_attention_oracle(&kv, &kv, &kv, &store, &att).1;
    assert_rows_close(g.value(out), &vp, 1e-14);

    // identical keys
    let q = g.input(random_mat(&mut r, 2, 3));
    let row = random_mat(&mut r, 1, 3);
    let k = g.input(Mat::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]));
    let (w, _) = att.forward(&mut g, &store, q, k, k).unwrap();
    assert!(g.value(w).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

    // dense oracle, 5 queries × 4 keys
    let (qm, km, vm) = (random_mat(&mut r, 5, 3), random_mat(&mut r, 4, 3), random_mat(&mut r, 4, 3));
    let (q, k, v) = (g.input(qm.clone()), g.input(km.clone()), g.input(vm.clone()));
    let (w, out) = att.forward(&mut g, &store, q, k, v).unwrap();
    let (ww, wo) = dense_attention_oracle(&qm, &km, &vm, &store, &att);
    assert_rows_close(g.value(w), &ww, 1e-10);
    assert_rows_close(g.value(out), &wo, 1e-10);
    for rr in 0..5 {
        assert!((g.value(w).row(rr).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let empty = g.input(Mat::zeros(0, 3));
    assert!(matches!(att.forward(&mut g, &store, q, empty, empty), Err(Error::EmptyContext(_))));
}

#[test]
fn mlp3_cases() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let mlp = Mlp3::new(&mut store, "mlp", [3, 3, 3, 3], &mut r);
    let x = random_mat(&mut r, 4, 3).map(f64::abs);

    // zero weights, last bias b
    let mut zeroed = store.clone();
    for p in zeroed.iter_mut() {
        p.value.fill(0.0);
    }
    zeroed.get_mut(mlp.layers[2].b).value = Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = mlp.forward(&mut g, &zeroed, xi).unwrap();
    for rr in 0..4 {
        assert_eq!(g.value(y).row(rr), &[0.5, -1.0, 2.0]);
    }

    // identity weights, zero bias, non-negative input
    let mut ident = store.clone();
    for p in ident.iter_mut() {
        p.value.fill(0.0);
        if p.name.ends_with(".w") {
            (0..3).for_each(|i| p.value.set(i, i, 1.0));
        }
    }
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let y = mlp.forward(&mut g, &ident, xi).unwrap();
    assert_eq!(g.value(y), &x);

    let mut g = Graph::new();

    // matrix oracle on random weights
    let xm = random_mat(&mut r, 4, 3);
    let xi = g.input(xm.clone());
    let y = mlp.forward(&mut g, &store, xi).unwrap();
    let mut h: Vec<Vec<f64>> = (0..4).map(|rr| xm.row(rr).to_vec()).collect();
    for (li, l) in mlp.layers.iter().enumerate() {
        let (w, b) = (&store.get(l.w).value, &store.get(l.b).value);
        h = h
            .iter()
            .map(|row| {
                (0..w.cols())
                    .map(|c| {
                        let v = b.get(0, c) + row.iter().enumerate().map(|(i, x)| x * w.get(i, c)).sum::<f64>();
                        if li < 2 { v.max(0.0) } else { v }
                    })
                    .collect()
            })
            .collect();
    }
    assert_rows_close(g.value(y), &h, 1e-12);

    let bad = g.input(Mat::zeros(2, 5));
    assert!(matches!(mlp.forward(&mut g, &store, bad), Err(Error::Shape(_))));
}

const GRAD_TOL: f64 = 1e-4;

#[test]
fn gradients_of_each_sparse_layer() {
    let mut r = rng(11);
    let coords = random_coords(&mut r, 8, 8, 0.45);
    let fine = random_mat(&mut r, coords.len(), 3);
    let mut store = ParamStore::new();
    let conv3 = bevnet::nn::Conv::new(&mut store, "c3", 3, 3, 4, &mut r);
    let down = bevnet::nn::Conv::new(&mut store, "down", 2, 4, 5, &mut r);
    let up = bevnet::nn::Conv::new(&mut store, "up", 3, 9, 3, &mut r);
    let feat_param = store.add("feat", fine.clone());
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            p.value = random_mat(&mut r, 1, p.value.cols());
        }
    }
    let layout = Rc::new(SparseLayout::new(8, 8, coords).unwrap());
    let weights = random_mat(&mut r, layout.len(), 3);
    let report = check_params(&mut store, None, GradCheckOptions::default(), |g, s| {
        let f = g.param(s, feat_param);
        let x = SparseFeatureMap::new(g, layout.clone(), f)?;
        let a = conv3.subm(g, s, &x)?;
        let a = pointwise(g, &a, Pointwise::Sigmoid)?;
        let c = down.strided(g, s, &a)?;
        let u = upsample_concat(g, &c, &a)?;
        let y = up.subm(g, s, &u)?;
        let y = add_maps(g, &y, &x)?;
        let p = sparse_avg_pool(g, &y, 3)?;
        let n = pointwise(g, &p, Pointwise::L2Norm)?;
        let wv = g.input(weights.clone());
        let m = g.mul(n.features, wv)?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(report.passes(GRAD_TOL), "{report:?}");
}

#[test]
fn gradients_of_attention_and_mlp() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "att", 4, 3, &mut r);
    let mlp = Mlp3::new(&mut store, "mlp", [8, 6, 5, 4], &mut r);
    let q = store.add("q", random_mat(&mut r, 5, 4));
    let k = store.add("k", random_mat(&mut r, 4, 4));
    let target = random_mat(&mut r, 5, 4);
    let report = check_params(&mut store, None, GradCheckOptions::default(), |g, s| {
        let (qv, kv) = (g.param(s, q), g.param(s, k));
        let (_, a) = att.forward(g, s, qv, kv, kv)?;
        let c = g.concat_cols(qv, a)?;
        let y = mlp.forward(g, s, c)?;
        let t = g.input(target.clone());
        let d = g.sub(y, t)?;
        let d2 = g.mul(d, d)?;
        g.mean(d2)
    })
    .unwrap();
    assert!(report.passes(GRAD_TOL), "{report:?}");
}

#[test]
fn injected_conv_gradient_fault_is_caught() {
    let mut r = rng(13);
    let coords = random_coords(&mut r, 6, 6, 0.5);
    let mut store = ParamStore::new();
    let conv = bevnet::nn::Conv::new(&mut store, "c", 3, 2, 2, &mut r);
    let layout = Rc::new(SparseLayout::new(6, 6, coords).unwrap());
    let feats = random_mat(&mut r, layout.len(), 2);
    let f = |g: &mut Graph, s: &ParamStore| {
        let v = g.input(feats.clone());
        let x = SparseFeatureMap::new(g, layout.clone(), v)?;
        let y = conv.subm(g, s, &x)?;
        let y2 = g.mul(y.features, y.features)?;
        Ok(g.sum(y2))
    };
    assert!(check_params(&mut store, None, GradCheckOptions::default(), f).unwrap().passes(GRAD_TOL));
    bevnet::nn::tape::set_conv_grad_fault(true);
    let bad = check_params(&mut store, None, GradCheckOptions::default(), f).unwrap();
    bevnet::nn::tape::set_conv_grad_fault(false);
    assert!(!bad.passes(GRAD_TOL));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparse_conv_equals_masked_dense(seed in 0u64..10_000, k in prop::sample::select(vec![1usize, 3, 5]), density in 0.1f64..0.9) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(2..10), r.random_range(2..10));
        let coords = random_coords(&mut r, h, w, density);
        let feats = random_mat(&mut r, coords.len(), 2);
        let wts = random_mat(&mut r, k * k * 2, 3);
        let mut g = Graph::new();
        let x = input_map(&mut g, h, w, coords.clone(), feats.clone());
        let wv = g.input(wts.clone());
        let y = submanifold_conv(&mut g, &x, wv, None, k).unwrap();
        let want = dense_conv_oracle(h, w, &coords, &feats, &wts, &[0.0; 3], k);
        let got = y.values(&g);
        for (rr, wr) in want.iter().enumerate() {
            for (a, b) in got.row(rr).iter().zip(wr) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
        // active-set invariant: unique, in-bounds, sorted
        let c = y.layout.coords();
        prop_assert!(c.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(c.iter().all(|&(i, j)| (i as usize) < h && (j as usize) < w));
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(99);
        let mut store = ParamStore::new();
        let conv = bevnet::nn::Conv::new(&mut store, "c", 3, 3, 3, &mut r);
        let coords = random_coords(&mut r, 8, 8, 0.5);
        let feats = random_mat(&mut r, coords.len(), 3);
        let mut g = Graph::new();
        let x = input_map(&mut g, 8, 8, coords, feats);
        let y = conv.subm(&mut g, &store, &x).unwrap();
        g.value(y.features).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
