//! Descriptor matching and robust rigid registration.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::RigidTransform;
use crate::nn::Mat;
use crate::{Error, Result};

/// Keypoint index pair `(p, q)` and the Euclidean descriptor distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p: usize,
    pub q: usize,
    pub distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_rows(from: &Mat, to: &Mat) -> Vec<(usize, f64)> {
    (0..from.rows())
        .map(|r| {
            let a = from.row(r);
            let mut best = (0, f64::INFINITY);
            for c in 0..to.rows() {
                let d = sq_dist(a, to.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Mutual nearest neighbours in descriptor space; ties go to the lower index.
pub fn mutual_nn(desc_p: &Mat, desc_q: &Mat) -> Result<Vec<Correspondence>> {
    if desc_p.rows() == 0 || desc_q.rows() == 0 {
        return Err(Error::EmptyInput("matching needs keypoints in both clouds"));
    }
    if desc_p.cols() != desc_q.cols() {
        return Err(Error::Shape(format!(
            "descriptor widths differ: {} vs {}",
            desc_p.cols(),
            desc_q.cols()
        )));
    }
    let pq = nearest_rows(desc_p, desc_q);
    let qp = nearest_rows(desc_q, desc_p);
    Ok(pq
        .iter()
        .enumerate()
        .filter(|&(i, &(j, _))| qp[j].0 == i)
        .map(|(i, &(j, d))| Correspondence {
            p: i,
            q: j,
            distance: d.sqrt(),
        })
        .collect())
}

/// Relative tolerance on the second singular value below which a set is degenerate.
pub const RANK_TOL: f64 = 1e-10;

/// Weighted least-squares rigid transform mapping `q` onto `p`.
pub fn kabsch(p: &[Vector3<f64>], q: &[Vector3<f64>], weights: Option<&[f64]>) -> Result<RigidTransform> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} P points vs {} Q points", p.len(), q.len())));
    }
    if p.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: p.len() });
    }
    let ones;
    let w = match weights {
        Some(w) if w.len() == p.len() => w,
        Some(w) => return Err(Error::Shape(format!("{} weights for {} pairs", w.len(), p.len()))),
        None => {
            ones = vec![1.0; p.len()];
            &ones
        }
    };
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::DegenerateConfiguration("weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateConfiguration("weights sum to zero".into()));
    }
    let cp = p.iter().zip(w).fold(Vector3::zeros(), |acc, (v, &x)| acc + v * x) / total;
    let cq = q.iter().zip(w).fold(Vector3::zeros(), |acc, (v, &x)| acc + v * x) / total;
    let mut h = Matrix3::zeros();
    for ((a, b), &x) in p.iter().zip(q).zip(w) {
        h += (b - cq) * (a - cp).transpose() * x;
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    if !(s[order[1]] > RANK_TOL * s[order[0]].max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateConfiguration("correspondences are collinear or coincident".into()));
    }
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = cp - r * cq;
    RigidTransform::from_approx(r, t)
}

/// RANSAC settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_radius: f64,
    pub early_exit_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            inlier_radius: 0.6,
            early_exit_ratio: 0.9,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.inlier_radius > 0.0) || !(self.early_exit_ratio > 0.0) {
            return Err(Error::Config("ransac needs positive iterations, radius and exit ratio".into()));
        }
        Ok(())
    }
}

/// Outcome of [`ransac_register`]; `success` is false when fewer than 3 inliers were found.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inliers: Vec<usize>,
    pub inlier_ratio: f64,
    pub iterations: usize,
    pub correspondences: usize,
    pub success: bool,
}

impl RegistrationResult {
    /// `r00,…,r23,inliers,correspondences,iterations` with 12 decimals for the transform.
    pub fn record(&self) -> String {
        let t: Vec<String> = self.transform.to_row_major().iter().map(|v| format!("{v:.12}")).collect();
        format!("{},{},{},{}", t.join(","), self.inliers.len(), self.correspondences, self.iterations)
    }
}

fn inliers_of(t: &RigidTransform, p: &[Vector3<f64>], q: &[Vector3<f64>], r2: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sse = 0.0;
    for (k, (a, b)) in p.iter().zip(q).enumerate() {
        let e = (a - t.apply(b)).norm_squared();
        if e <= r2 {
            idx.push(k);
            sse += e;
        }
    }
    let rms = if idx.is_empty() { f64::INFINITY } else { (sse / idx.len() as f64).sqrt() };
    (idx, rms)
}

fn better(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> bool {
    a.0.len() > b.0.len() || (a.0.len() == b.0.len() && a.1 < b.1)
}

/// Three-point RANSAC over corresponded positions, refit on the best inlier set.
pub fn ransac_points(p: &[Vector3<f64>], q: &[Vector3<f64>], cfg: &RansacConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} P points vs {} Q points", p.len(), q.len())));
    }
    let n = p.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    let r2 = cfg.inlier_radius * cfg.inlier_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(RigidTransform, (Vec<usize>, f64))> = None;
    let mut iterations = 0;
    let (mut sp, mut sq) = (Vec::with_capacity(3), Vec::with_capacity(3));
    while iterations < cfg.max_iterations {
        iterations += 1;
        sp.clear();
        sq.clear();
        for k in sample(&mut rng, n, 3) {
            sp.push(p[k]);
            sq.push(q[k]);
        }
        let Ok(t) = kabsch(&sp, &sq, None) else { continue };
        let score = inliers_of(&t, p, q, r2);
        if best.as_ref().is_none_or(|(_, b)| better(&score, b)) {
            let done = score.0.len() as f64 / n as f64 >= cfg.early_exit_ratio;
            best = Some((t, score));
            if done {
                break;
            }
        }
    }
    let Some((mut t, mut score)) = best else {
        return Ok(failure(n, iterations));
    };
    if score.0.len() >= 3 {
        let ip: Vec<_> = score.0.iter().map(|&k| p[k]).collect();
        let iq: Vec<_> = score.0.iter().map(|&k| q[k]).collect();
        if let Ok(refit) = kabsch(&ip, &iq, None) {
            let rs = inliers_of(&refit, p, q, r2);
            if rs.0.len() >= score.0.len() {
                t = refit;
                score = rs;
            }
        }
    }
    let success = score.0.len() >= 3;
    Ok(RegistrationResult {
        transform: t,
        inlier_ratio: score.0.len() as f64 / n as f64,
        inliers: score.0,
        iterations,
        correspondences: n,
        success,
    })
}

fn failure(n: usize, iterations: usize) -> RegistrationResult {
    RegistrationResult {
        transform: RigidTransform::identity(),
        inliers: Vec::new(),
        inlier_ratio: 0.0,
        iterations,
        correspondences: n,
        success: false,
    }
}

/// RANSAC on keypoint correspondences; `kp_p[c.p]` and `kp_q[c.q]` are the paired positions.
pub fn ransac_register(
    cs: &[Correspondence],
    kp_p: &[Vector3<f64>],
    kp_q: &[Vector3<f64>],
    cfg: &RansacConfig,
) -> Result<RegistrationResult> {
    if cs.iter().any(|c| c.p >= kp_p.len() || c.q >= kp_q.len()) {
        return Err(Error::Shape("correspondence index out of range".into()));
    }
    let p: Vec<_> = cs.iter().map(|c| kp_p[c.p]).collect();
    let q: Vec<_> = cs.iter().map(|c| kp_q[c.q]).collect();
    ransac_points(&p, &q, cfg)
}
