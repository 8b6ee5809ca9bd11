//! Central finite-difference checks of tape gradients.

use crate::error::Result;

use super::param::{ParamId, ParamStore};
use super::tape::{Graph, Var};

/// Options for [`check_params`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Step is `rel_step · max(1, |θ|)`.
    pub rel_step: f64,
    /// Gradients below this magnitude are compared on an absolute scale.
    pub abs_floor: f64,
    /// Check at most this many entries per parameter (evenly strided); `None` = all.
    pub max_entries: Option<usize>,
    /// Each entry is retried with the step divided by 10 up to this many times; the
    /// smallest error is kept, so a step that straddles a ReLU or max kink is not decisive.
    pub step_refinements: usize,
}

/// Rounding allowance, in units of machine epsilon of the loss value, per function evaluation.
pub const ROUNDOFF_ULPS: f64 = 64.0;

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-5,
            abs_floor: 1e-6,
            max_entries: None,
            step_refinements: 2,
        }
    }
}

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Relative error after discounting the rounding error `noise` of the central difference.
pub fn rel_error_beyond_noise(a: f64, n: f64, noise: f64, floor: f64) -> f64 {
    ((a - n).abs() - noise).max(0.0) / a.abs().max(n.abs()).max(floor)
}

/// Compares `∂f/∂θ` from [`Graph::backward`] against central differences for every
/// parameter entry in `store` (or the subset in `only`).
pub fn check_params<F>(store: &mut ParamStore, only: Option<&[ParamId]>, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<_> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let ids: Vec<ParamId> = match only {
        Some(s) => s.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for id in ids {
        let n = store.get(id).value.len();
        let stride = opts.max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for e in (0..n).step_by(stride) {
            let theta = store.get(id).value.data()[e];
            let a = analytic[id.0].data()[e];
            let mut h = opts.rel_step * theta.abs().max(1.0);
            let (mut r, mut numeric) = (f64::INFINITY, 0.0);
            for _ in 0..=opts.step_refinements {
                store.get_mut(id).value.data_mut()[e] = theta + h;
                let fp = eval(store)?;
                store.get_mut(id).value.data_mut()[e] = theta - h;
                let fm = eval(store)?;
                store.get_mut(id).value.data_mut()[e] = theta;
                let n = (fp - fm) / (2.0 * h);
                let noise = ROUNDOFF_ULPS * f64::EPSILON * fp.abs().max(fm.abs()) / h;
                let err = rel_error_beyond_noise(a, n, noise, opts.abs_floor);
                if err < r {
                    (r, numeric) = (err, n);
                }
                if r <= 1e-8 {
                    break;
                }
                h /= 10.0;
            }
            report.checked += 1;
            if report.checked == 1 || r > report.max_rel_error {
                report.max_rel_error = r;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
