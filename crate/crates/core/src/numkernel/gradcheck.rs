//! Central finite-difference verification of hand-written gradients.

use serde::{Deserialize, Serialize};

use super::optim::{ParamTensor, Parameterized};

/// One evaluation of a scalar objective.
///
/// `signature` identifies the linear piece of every piecewise-linear
/// activation traversed (see [`super::sign_signature`]); objectives without
/// kinks can return a constant.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self { value, signature: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub skipped_frozen: Vec<String>,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    /// Entries whose stencil crossed an activation kink and was shrunk.
    pub refined: usize,
    /// Entries sitting on a kink at every tried step (not compared).
    pub kinks_skipped: usize,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.kinks_skipped == 0
    }
}

/// Tunables for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, guarding near-zero gradients.
    pub abs_floor: f64,
    /// How many times the step may be divided by 10 when a kink is crossed.
    pub max_refine: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_refine: 3,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn perturb<M: Parameterized + ?Sized>(model: &mut M, target: usize, entry: usize, delta: f64) {
    let mut idx = 0;
    model.visit_params_mut("", &mut |_, p: &mut ParamTensor| {
        if idx == target {
            p.value.data_mut()[entry] += delta;
        }
        idx += 1;
    });
}

fn set_entry<M: Parameterized + ?Sized>(model: &mut M, target: usize, entry: usize, value: f64) {
    let mut idx = 0;
    model.visit_params_mut("", &mut |_, p: &mut ParamTensor| {
        if idx == target {
            p.value.data_mut()[entry] = value;
        }
        idx += 1;
    });
}

/// Compares the gradients currently stored in `model` against central
/// differences of `objective`, entry by entry, for every trainable parameter.
/// Frozen parameters are listed but not perturbed.
pub fn finite_diff_check<M, F>(model: &mut M, mut objective: F, opts: GradCheckOptions) -> GradCheckReport
where
    M: Parameterized + ?Sized,
    F: FnMut(&M) -> Probe,
{
    let mut meta: Vec<(String, bool, Vec<f64>, Vec<f64>)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        meta.push((
            name.to_string(),
            p.frozen,
            p.grad.data().to_vec(),
            p.value.data().to_vec(),
        ));
    });
    let base_sig = objective(model).signature;
    let mut report = GradCheckReport {
        params: Vec::new(),
        skipped_frozen: Vec::new(),
        entries: 0,
        max_rel_err: 0.0,
        worst: None,
        refined: 0,
        kinks_skipped: 0,
        h: opts.h,
        tol: opts.tol,
    };
    for (pi, (name, frozen, grads, values)) in meta.iter().enumerate() {
        if *frozen {
            report.skipped_frozen.push(name.clone());
            continue;
        }
        let mut check = ParamCheck {
            name: name.clone(),
            entries: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for (j, (&analytic, &orig)) in grads.iter().zip(values).enumerate() {
            let mut h = opts.h;
            let mut numeric = None;
            let mut one_sided = None;
            for attempt in 0..=opts.max_refine {
                perturb(model, pi, j, h);
                let plus = objective(model);
                set_entry(model, pi, j, orig - h);
                let minus = objective(model);
                set_entry(model, pi, j, orig);
                let (p_ok, m_ok) = (plus.signature == base_sig, minus.signature == base_sig);
                if p_ok && m_ok {
                    numeric = Some((plus.value - minus.value) / (2.0 * h));
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    break;
                }
                if p_ok != m_ok {
                    let centre = objective(model).value;
                    one_sided = Some(if p_ok {
                        (plus.value - centre) / h
                    } else {
                        (centre - minus.value) / h
                    });
                }
                h /= 10.0;
            }
            let numeric = match numeric.or(one_sided) {
                Some(n) => n,
                None => {
                    report.kinks_skipped += 1;
                    continue;
                }
            };
            if numeric.is_nan() {
                report.kinks_skipped += 1;
                continue;
            }
            if one_sided.is_some() && numeric == one_sided.unwrap() {
                report.refined += 1;
            }
            let rel = relative_error(analytic, numeric, opts.abs_floor);
            check.entries += 1;
            check.max_abs_err = check.max_abs_err.max((analytic - numeric).abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), j));
            }
        }
        report.entries += check.entries;
        report.params.push(check);
    }
    report
}
