//! Training losses and their supervision against direct formula oracles.

use std::rc::Rc;

use bevnet::bev::{BevConfig, Extent, GridShape, PointCloud, RigidTransform, Vector3};
use bevnet::losses::{
    bce_loss, circle_loss, classification_bce, detection_loss, make_overlap_labels, regression_loss_dir,
    regression_targets, sample_correspondences, total_loss, CorrespondenceSample, PlanarIndex, Radii, SampleIndex,
};
use bevnet::nn::gradcheck::{check_params, GradCheckOptions};
use bevnet::nn::{CircleGroups, CircleParams, Graph, Mat, ParamStore, SparseLayout};
use bevnet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn params() -> CircleParams {
    CircleParams::default()
}

/// Circle loss of one anchor by direct summation of exponentials.
fn circle_direct(pos: &[f64], neg: &[f64], p: CircleParams) -> f64 {
    let sp: f64 = pos
        .iter()
        .map(|d| {
            let u = d - p.pos_margin;
            (p.circle_scale * u.abs() * u).exp()
        })
        .sum();
    let sn: f64 = neg
        .iter()
        .map(|d| {
            let u = p.neg_margin - d;
            (p.circle_scale * u.abs() * u).exp()
        })
        .sum();
    (1.0 + sp * sn).ln()
}

fn circle_of(groups: Vec<(Vec<f64>, Vec<f64>)>) -> f64 {
    let mut col = Vec::new();
    let mut idx = Vec::new();
    for (pos, neg) in &groups {
        let p: Vec<usize> = pos.iter().map(|&d| {
            col.push(d);
            col.len() - 1
        }).collect();
        let n: Vec<usize> = neg.iter().map(|&d| {
            col.push(d);
            col.len() - 1
        }).collect();
        idx.push((p, n));
    }
    let mut g = Graph::new();
    let d = g.input(Mat::column(col));
    let l = g.circle(d, Rc::new(CircleGroups { groups: idx }), params()).unwrap();
    g.value(l).item()
}

#[test]
fn circle_margin_boundary_is_ln2() {
    let v = circle_of(vec![(vec![0.1], vec![1.4])]);
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn circle_saturates_for_easy_pairs() {
    let v = circle_of(vec![(vec![0.0, 0.05], vec![3.0, 4.0])]);
    assert!(v > 0.0 && v < 1e-9, "loss {v}");
}

#[test]
fn circle_empty_group_is_a_sampling_contract_error() {
    let mut g = Graph::new();
    let d = g.input(Mat::column(vec![0.3]));
    let groups = Rc::new(CircleGroups { groups: vec![(vec![0], vec![])] });
    assert!(matches!(g.circle(d, groups, params()), Err(Error::SamplingContract(_))));
    let s = CorrespondenceSample { anchor: 0, matched: 0, positives: vec![0], negatives: vec![] };
    assert!(matches!(SampleIndex::new(&[s]), Err(Error::SamplingContract(_))));
}

fn random_samples(r: &mut ChaCha8Rng, anchors: usize, n_dst: usize) -> Vec<CorrespondenceSample> {
    (0..anchors)
        .map(|a| {
            let mut cells: Vec<usize> = (0..n_dst).collect();
            for k in (1..cells.len()).rev() {
                cells.swap(k, r.random_range(0..=k));
            }
            let np = r.random_range(1..4);
            let nn = r.random_range(1..6);
            let positives = cells[..np].to_vec();
            let negatives = cells[np..np + nn].to_vec();
            CorrespondenceSample { anchor: a, matched: positives[0], positives, negatives }
        })
        .collect()
}

/// Euclidean distance with the tape's guard term under the root.
fn dist(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() + bevnet::nn::tape::DIST_EPS).sqrt()
}

#[test]
fn five_anchor_circle_matches_direct_sum() {
    let mut r = rng(1);
    let src = Mat::from_vec(5, 3, (0..15).map(|_| r.random_range(-0.6..0.6)).collect());
    let dst = Mat::from_vec(9, 3, (0..27).map(|_| r.random_range(-0.6..0.6)).collect());
    let samples = random_samples(&mut r, 5, 9);
    let index = SampleIndex::new(&samples).unwrap();
    let mut g = Graph::new();
    let (s, t) = (g.input(src.clone()), g.input(dst.clone()));
    let d = index.distances(&mut g, s, t).unwrap();
    let l = circle_loss(&mut g, d, &index, params()).unwrap();
    let want: f64 = samples
        .iter()
        .map(|smp| {
            let dp: Vec<f64> = smp.positives.iter().map(|&b| dist(src.row(smp.anchor), dst.row(b))).collect();
            let dn: Vec<f64> = smp.negatives.iter().map(|&b| dist(src.row(smp.anchor), dst.row(b))).collect();
            circle_direct(&dp, &dn, params())
        })
        .sum::<f64>()
        / 5.0;
    assert!((g.value(l).item() - want).abs() <= 1e-9, "{} vs {want}", g.value(l).item());
}

fn det_setup(src: Mat, dst: Mat, samples: &[CorrespondenceSample], sp: Vec<f64>, sq: Vec<f64>) -> (f64, Vec<f64>, Vec<f64>) {
    let mut store = ParamStore::new();
    let ip = store.add("sp", Mat::column(sp));
    let iq = store.add("sq", Mat::column(sq));
    let index = SampleIndex::new(samples).unwrap();
    let mut g = Graph::new();
    let (s, t) = (g.input(src), g.input(dst));
    let d = index.distances(&mut g, s, t).unwrap();
    let (vp, vq) = (g.param(&store, ip), g.param(&store, iq));
    let l = detection_loss(&mut g, d, &index, vp, vq).unwrap();
    g.backward(l, &mut store).unwrap();
    (g.value(l).item(), store.get(ip).grad.data().to_vec(), store.get(iq).grad.data().to_vec())
}

#[test]
fn detection_loss_single_anchor_closed_form() {
    let src = Mat::from_rows(&[vec![0.0]]);
    let dst = Mat::from_rows(&[vec![0.2], vec![0.7]]);
    let s = CorrespondenceSample { anchor: 0, matched: 0, positives: vec![0], negatives: vec![1] };
    let (l, gp, gq) = det_setup(src, dst, &[s], vec![0.5], vec![0.5, 0.5]);
    assert!((l + 0.5).abs() < 1e-10);
    assert!((gp[0] + 0.5).abs() < 1e-10);
    assert_eq!(gq[1], 0.0);

    let src = Mat::from_rows(&[vec![0.0], vec![1.0]]);
    let dst = Mat::from_rows(&[vec![0.3], vec![-0.3], vec![1.4], vec![0.6]]);
    let smp = vec![
        CorrespondenceSample { anchor: 0, matched: 0, positives: vec![0], negatives: vec![1] },
        CorrespondenceSample { anchor: 1, matched: 2, positives: vec![2], negatives: vec![3] },
    ];
    let (l, _, _) = det_setup(src, dst, &smp, vec![0.9, 0.2], vec![0.1, 0.4, 0.3, 0.8]);
    assert!(l.abs() < 1e-10);
}

#[test]
fn detection_loss_matches_formula_and_score_gradient() {
    let mut r = rng(2);
    let src = Mat::from_vec(6, 4, (0..24).map(|_| r.random_range(-1.0..1.0)).collect());
    let dst = Mat::from_vec(10, 4, (0..40).map(|_| r.random_range(-1.0..1.0)).collect());
    let samples = random_samples(&mut r, 6, 10);
    let sp: Vec<f64> = (0..6).map(|_| r.random_range(0.0..2.0)).collect();
    let sq: Vec<f64> = (0..10).map(|_| r.random_range(0.0..2.0)).collect();
    let (l, gp, gq) = det_setup(src.clone(), dst.clone(), &samples, sp.clone(), sq.clone());
    let n = samples.len() as f64;
    let (mut want, mut wp, mut wq) = (0.0, vec![0.0; 6], vec![0.0; 10]);
    for s in &samples {
        let dpos = dist(src.row(s.anchor), dst.row(s.matched));
        let dneg = s.negatives.iter().map(|&b| dist(src.row(s.anchor), dst.row(b))).fold(f64::MAX, f64::min);
        want += (dpos - dneg) * (sp[s.anchor] + sq[s.matched]) / n;
        wp[s.anchor] += (dpos - dneg) / n;
        wq[s.matched] += (dpos - dneg) / n;
    }
    assert!((l - want).abs() <= 1e-12);
    for (a, b) in gp.iter().zip(&wp).chain(gq.iter().zip(&wq)) {
        assert!((a - b).abs() <= 1e-12);
    }
}

fn bev() -> BevConfig {
    BevConfig::new(Extent::centered(8.0, 8.0, -2.0, 2.0), GridShape { rows: 16, cols: 16, layers: 8 }, 3).unwrap()
}

fn cell_centers(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut cells: Vec<(usize, usize)> = (0..16).flat_map(|i| (0..16).map(move |j| (i, j))).collect();
    for k in (1..cells.len()).rev() {
        cells.swap(k, r.random_range(0..=k));
    }
    let cfg = bev();
    cells[..n]
        .iter()
        .map(|&(i, j)| {
            let [x, y] = cfg.cell_center(i, j, 1);
            [x, y, r.random_range(-1.5..1.5)]
        })
        .collect()
}

#[test]
fn identical_clouds_sample_their_own_cell() {
    let mut r = rng(3);
    let cells = cell_centers(&mut r, 60);
    let radii = Radii::for_cell(0.5f64.hypot(0.5) * 2.0);
    let s = sample_correspondences(&cells, &cells, &RigidTransform::identity(), 40, 8, radii, &mut r).unwrap();
    assert!(!s.is_empty());
    for smp in &s {
        assert_eq!(smp.matched, smp.anchor);
        assert!(smp.positives.contains(&smp.anchor));
    }
}

#[test]
fn far_clouds_have_no_overlap() {
    let mut r = rng(4);
    let p = cell_centers(&mut r, 30);
    let q = cell_centers(&mut r, 30);
    let gt = RigidTransform::from_yaw(0.0, Vector3::new(100.0, 0.0, 0.0));
    let res = sample_correspondences(&p, &q, &gt, 16, 8, Radii::for_cell(1.0), &mut r);
    assert!(matches!(res, Err(Error::NoOverlap)));
}

#[test]
fn sampling_replays_under_a_fixed_seed() {
    let mut r = rng(5);
    let p = cell_centers(&mut r, 50);
    let q = cell_centers(&mut r, 50);
    let gt = RigidTransform::from_yaw(0.1, Vector3::new(0.5, -0.3, 0.0));
    let a = sample_correspondences(&p, &q, &gt, 20, 6, Radii::for_cell(1.0), &mut rng(77)).unwrap();
    let b = sample_correspondences(&p, &q, &gt, 20, 6, Radii::for_cell(1.0), &mut rng(77)).unwrap();
    assert_eq!(a, b);
    let c = sample_correspondences(&p, &q, &gt, 20, 6, Radii::for_cell(1.0), &mut rng(78)).unwrap();
    assert_ne!(a, c);
}

fn planar_after(q: [f64; 3], gt: &RigidTransform) -> [f64; 2] {
    let v = gt.apply(&Vector3::new(q[0], q[1], q[2]));
    [v.x, v.y]
}

fn brute_nearest(points: &[[f64; 3]], x: f64, y: f64) -> usize {
    let mut best = (f64::MAX, 0);
    for (n, p) in points.iter().enumerate() {
        let d = (p[0] - x).powi(2) + (p[1] - y).powi(2);
        if d < best.0 {
            best = (d, n);
        }
    }
    best.1
}

#[test]
fn regression_offset_and_zero_cases() {
    let mut r = rng(6);
    let cells = cell_centers(&mut r, 40);
    let raw = PlanarIndex::new(cells.clone(), 1.0);
    let targets = regression_targets(&cells, &raw, &cells, &RigidTransform::identity(), 0.75).unwrap();
    let z: Vec<f64> = cells.iter().map(|c| c[2]).collect();
    let run = |own: Vec<f64>, other: Vec<f64>| {
        let mut g = Graph::new();
        let a = g.input(Mat::column(own));
        let b = g.input(Mat::column(other));
        let l = regression_loss_dir(&mut g, a, b, &targets).unwrap();
        g.value(l).item()
    };
    assert!(run(z.clone(), z.clone()).abs() < 1e-12);
    let shifted: Vec<f64> = z.iter().map(|v| v + 0.3).collect();
    assert!((run(shifted, z.clone()) - 0.6).abs() < 1e-12);
    assert!(matches!(
        regression_targets(&[], &raw, &cells, &RigidTransform::identity(), 0.75),
        Err(Error::EmptyInput(_))
    ));
}

#[test]
fn regression_matches_brute_force_oracle() {
    let mut r = rng(7);
    let own = cell_centers(&mut r, 50);
    let other = cell_centers(&mut r, 50);
    let raw_pts: Vec<[f64; 3]> = (0..300)
        .map(|_| [r.random_range(-8.0..8.0), r.random_range(-8.0..8.0), r.random_range(-2.0..2.0)])
        .collect();
    let gt = RigidTransform::from_euler(0.02, -0.03, 0.4, Vector3::new(0.6, -0.2, 0.1));
    let radius = 0.75;
    let targets = regression_targets(&own, &PlanarIndex::new(raw_pts.clone(), 1.0), &other, &gt, radius).unwrap();
    let z_own: Vec<f64> = (0..50).map(|_| r.random_range(-2.0..2.0)).collect();
    let z_other: Vec<f64> = (0..50).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut g = Graph::new();
    let a = g.input(Mat::column(z_own.clone()));
    let b = g.input(Mat::column(z_other.clone()));
    let l = regression_loss_dir(&mut g, a, b, &targets).unwrap();

    let moved: Vec<[f64; 3]> = other.iter().map(|&q| {
        let [x, y] = planar_after(q, &gt);
        [x, y, 0.0]
    }).collect();
    let mut want = 0.0;
    for (n, c) in own.iter().enumerate() {
        want += (z_own[n] - raw_pts[brute_nearest(&raw_pts, c[0], c[1])][2]).abs();
        let m = brute_nearest(&moved, c[0], c[1]);
        if (moved[m][0] - c[0]).hypot(moved[m][1] - c[1]) <= radius {
            let zt = gt.apply(&Vector3::new(other[m][0], other[m][1], z_other[m])).z;
            want += (z_own[n] - zt).abs();
        }
    }
    want /= 50.0;
    assert!((g.value(l).item() - want).abs() <= 1e-12, "{} vs {want}", g.value(l).item());
}

#[test]
fn bce_cases_and_elementwise_oracle() {
    let bce = |gamma: Vec<f64>, labels: &[f64]| {
        let mut g = Graph::new();
        let v = g.input(Mat::column(gamma));
        let l = bce_loss(&mut g, v, labels).unwrap();
        g.value(l).item()
    };
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
    assert!(bce(labels.to_vec(), &labels) < 1e-11);
    assert!((bce(vec![0.5; 5], &labels) - std::f64::consts::LN_2).abs() < 1e-15);

    let mut r = rng(8);
    let gamma: Vec<f64> = (0..30).map(|_| r.random_range(0.01..0.99)).collect();
    let lab: Vec<f64> = (0..30).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let want = gamma.iter().zip(&lab).map(|(p, l)| -(l * p.ln() + (1.0 - l) * (1.0 - p).ln())).sum::<f64>() / 30.0;
    assert!((bce(gamma.clone(), &lab) - want).abs() <= 1e-10);

    let mut g = Graph::new();
    let v = g.input(Mat::column(gamma));
    assert!(matches!(bce_loss(&mut g, v, &lab[..10]), Err(Error::Shape(_))));
}

#[test]
fn total_loss_is_a_weighted_dot_product() {
    let mut r = rng(9);
    let vals: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
    let w: Vec<f64> = (0..5).map(|_| r.random_range(0.0..2.0)).collect();
    let mut g = Graph::new();
    let parts: Vec<_> = vals.iter().map(|&v| Some(g.input(Mat::scalar(v)))).collect();
    let named: Vec<(&str, _)> = ["desc", "det", "reg", "bce", "sg"].into_iter().zip(parts.clone()).collect();
    let t = total_loss(&mut g, &named, &w).unwrap();
    let want: f64 = vals.iter().zip(&w).map(|(a, b)| a * b).sum();
    assert!((g.value(t).item() - want).abs() < 1e-12);

    let single = total_loss(&mut g, &named, &[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(g.value(single).item(), vals[2]);

    let zeros: Vec<_> = (0..5).map(|_| Some(g.input(Mat::scalar(0.0)))).collect();
    let zn: Vec<(&str, _)> = ["desc", "det", "reg", "bce", "sg"].into_iter().zip(zeros).collect();
    let zt = total_loss(&mut g, &zn, &[1.0; 5]).unwrap();
    assert_eq!(g.value(zt).item(), 0.0);

    let bad = g.input(Mat::scalar(f64::NAN));
    let mut named = named;
    named[3].1 = Some(bad);
    match total_loss(&mut g, &named, &w) {
        Err(Error::NonFinite { term }) => assert_eq!(term, "bce"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

fn cloud(points: &[[f64; 3]]) -> PointCloud {
    PointCloud::from_xyz(points).unwrap()
}

fn deep_layout(cfg: &BevConfig, stride: usize, pts: &[[f64; 3]]) -> SparseLayout {
    let coords = pts
        .iter()
        .filter_map(|p| Some(((cfg.bin(0, p[0])? / stride) as u32, (cfg.bin(1, p[1])? / stride) as u32)))
        .collect();
    SparseLayout::new(cfg.shape.rows / stride, cfg.shape.cols / stride, coords).unwrap()
}

fn label_oracle(cfg: &BevConfig, stride: usize, layout: &SparseLayout, other: &[[f64; 3]], t: &RigidTransform) -> Vec<f64> {
    let size = cfg.planar_cell() * stride as f64;
    layout
        .coords()
        .iter()
        .map(|&(a, b)| {
            let x0 = cfg.extent.min[0] + a as f64 * size;
            let y0 = cfg.extent.min[1] + b as f64 * size;
            let hit = other.iter().any(|&q| {
                let v = t.apply(&Vector3::new(q[0], q[1], q[2]));
                v.x >= x0 && v.x < x0 + size && v.y >= y0 && v.y < y0 + size
            });
            if hit { 1.0 } else { 0.0 }
        })
        .collect()
}

fn random_points(r: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [r.random_range(-half..half), r.random_range(-half..half), r.random_range(-1.5..1.5)])
        .collect()
}

#[test]
fn labels_identical_disjoint_and_oracle() {
    let cfg = bev();
    let mut r = rng(10);
    let pts = random_points(&mut r, 200, 7.9);
    let lay = deep_layout(&cfg, 4, &pts);
    let id = RigidTransform::identity();
    let l = make_overlap_labels(&cfg, 4, &lay, &lay, &cloud(&pts), &cloud(&pts), &id);
    assert!(l.p.iter().chain(&l.q).all(|&v| v == 1.0));

    let far = RigidTransform::from_yaw(0.0, Vector3::new(40.0, 0.0, 0.0));
    let l = make_overlap_labels(&cfg, 4, &lay, &lay, &cloud(&pts), &cloud(&pts), &far);
    assert!(l.p.iter().chain(&l.q).all(|&v| v == 0.0));

    let q = random_points(&mut r, 200, 7.9);
    let lq = deep_layout(&cfg, 4, &q);
    let gt = RigidTransform::from_yaw(0.7, Vector3::new(3.0, -2.0, 0.0));
    let l = make_overlap_labels(&cfg, 4, &lay, &lq, &cloud(&pts), &cloud(&q), &gt);
    assert_eq!(l.p, label_oracle(&cfg, 4, &lay, &q, &gt));
    assert_eq!(l.q, label_oracle(&cfg, 4, &lq, &pts, &gt.inverse()));
    assert!(l.p.contains(&0.0) && l.p.contains(&1.0));
}

#[test]
fn circle_and_detection_pass_gradient_checks() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let src = store.add("src", Mat::from_vec(5, 3, (0..15).map(|_| r.random_range(-0.6..0.6)).collect()));
    let dst = store.add("dst", Mat::from_vec(8, 3, (0..24).map(|_| r.random_range(-0.6..0.6)).collect()));
    let sp = store.add("sp", Mat::column((0..5).map(|_| r.random_range(0.1..1.0)).collect()));
    let sq = store.add("sq", Mat::column((0..8).map(|_| r.random_range(0.1..1.0)).collect()));
    let gam = store.add("gamma", Mat::column((0..8).map(|_| r.random_range(0.1..0.9)).collect()));
    let labels: Vec<f64> = (0..8).map(|k| (k % 2) as f64).collect();
    let samples = random_samples(&mut r, 5, 8);
    let index = SampleIndex::new(&samples).unwrap();
    let report = check_params(&mut store, None, GradCheckOptions::default(), |g, s| {
        let (a, b) = (g.param(s, src), g.param(s, dst));
        let d = index.distances(g, a, b)?;
        let c = circle_loss(g, d, &index, params())?;
        let (pa, qa) = (g.param(s, sp), g.param(s, sq));
        let det = detection_loss(g, d, &index, pa, qa)?;
        let gm = g.param(s, gam);
        let bce = bce_loss(g, gm, &labels)?;
        let t = g.add(c, det)?;
        g.add(t, bce)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");

    let mut store = ParamStore::new();
    let zo = store.add("zo", Mat::column((0..30).map(|_| r.random_range(-1.0..1.0)).collect()));
    let zc = store.add("zc", Mat::column((0..30).map(|_| r.random_range(-1.0..1.0)).collect()));
    let own = cell_centers(&mut r, 30);
    let other = cell_centers(&mut r, 30);
    let raw = PlanarIndex::new(random_points(&mut r, 100, 8.0), 1.0);
    let gt = RigidTransform::from_yaw(0.2, Vector3::new(0.3, 0.1, 0.05));
    let targets = regression_targets(&own, &raw, &other, &gt, 1.0).unwrap();
    let report = check_params(&mut store, None, GradCheckOptions::default(), |g, s| {
        let (a, b) = (g.param(s, zo), g.param(s, zc));
        regression_loss_dir(g, a, b, &targets)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn circle_is_nonnegative_and_monotone_in_positives(
        pos in prop::collection::vec(0.0f64..2.0, 1..5),
        neg in prop::collection::vec(0.0f64..2.0, 1..5),
        which in any::<prop::sample::Index>(),
        shrink in 0.01f64..0.5,
    ) {
        let base = circle_of(vec![(pos.clone(), neg.clone())]);
        prop_assert!(base >= 0.0);
        let mut closer = pos.clone();
        let k = which.index(closer.len());
        closer[k] = (closer[k] - shrink).max(0.0);
        prop_assume!(closer[k] < pos[k]);
        let after = circle_of(vec![(closer, neg)]);
        prop_assert!(after < base || (base - after).abs() <= 1e-15 * base.max(1e-300), "{after} !< {base}");
    }

    #[test]
    fn sampled_sets_respect_radii(seed in any::<u64>(), n in 1usize..40, max_neg in 1usize..10) {
        let mut r = rng(seed);
        let p = cell_centers(&mut r, 60);
        let q = cell_centers(&mut r, 60);
        let gt = RigidTransform::from_yaw(r.random_range(-0.5..0.5), Vector3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), 0.0));
        let radii = Radii::for_cell(1.0);
        if let Ok(s) = sample_correspondences(&p, &q, &gt, n, max_neg, radii, &mut r) {
            prop_assert!(s.len() <= n);
            for smp in &s {
                prop_assert!(smp.negatives.len() <= max_neg);
                let a = [p[smp.anchor][0], p[smp.anchor][1]];
                let d = |b: usize| {
                    let m = planar_after(q[b], &gt);
                    (m[0] - a[0]).hypot(m[1] - a[1])
                };
                prop_assert!(smp.positives.iter().all(|&b| d(b) <= radii.positive + 1e-12));
                prop_assert!(smp.negatives.iter().all(|&b| d(b) > radii.safe));
                prop_assert!(smp.positives.iter().all(|b| !smp.negatives.contains(b)));
                prop_assert!(smp.positives.iter().all(|&b| d(b) >= d(smp.matched)));
            }
        }
    }

    #[test]
    fn labels_swap_with_inverse_transform(seed in any::<u64>()) {
        let cfg = bev();
        let mut r = rng(seed);
        let p = random_points(&mut r, 120, 7.9);
        let q = random_points(&mut r, 120, 7.9);
        let (lp, lq) = (deep_layout(&cfg, 2, &p), deep_layout(&cfg, 2, &q));
        let gt = RigidTransform::from_yaw(r.random_range(-3.0..3.0), Vector3::new(r.random_range(-4.0..4.0), r.random_range(-4.0..4.0), 0.0));
        let a = make_overlap_labels(&cfg, 2, &lp, &lq, &cloud(&p), &cloud(&q), &gt);
        let b = make_overlap_labels(&cfg, 2, &lq, &lp, &cloud(&q), &cloud(&p), &gt.inverse());
        prop_assert_eq!(a.p, b.q);
        prop_assert_eq!(a.q, b.p);
    }

    #[test]
    fn classification_bce_sums_both_directions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let gp: Vec<f64> = (0..7).map(|_| r.random_range(0.01..0.99)).collect();
        let gq: Vec<f64> = (0..4).map(|_| r.random_range(0.01..0.99)).collect();
        let labels = bevnet::losses::OverlapLabels {
            p: (0..7).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            q: (0..4).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        };
        let mut g = Graph::new();
        let (a, b) = (g.input(Mat::column(gp.clone())), g.input(Mat::column(gq.clone())));
        let both = classification_bce(&mut g, a, b, &labels).unwrap();
        let one = bce_loss(&mut g, a, &labels.p).unwrap();
        let two = bce_loss(&mut g, b, &labels.q).unwrap();
        prop_assert!((g.value(both).item() - g.value(one).item() - g.value(two).item()).abs() < 1e-14);
    }
}
