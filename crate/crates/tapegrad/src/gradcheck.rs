//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward pass, so it is an oracle that is
//! independent of every backward rule: it perturbs one parameter element at a
//! time, re-evaluates the loss closure, and compares the symmetric difference
//! quotient against the gradient produced by [`crate::backward`].

use crate::tape::backward;
use crate::{ParamStore, Var};

/// One disagreement between autodiff and finite differences.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_diff: f64,
    pub rel_error: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    /// Largest relative error seen across all checked elements.
    pub worst_rel_error: f64,
    /// Number of scalar elements compared.
    pub checked: usize,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn assert_ok(&self) {
        assert!(
            self.is_ok(),
            "gradient check failed ({} of {} elements, worst rel error {:.3e}); first: {:?}",
            self.mismatches.len(),
            self.checked,
            self.worst_rel_error,
            self.mismatches.first()
        );
    }
}

/// Relative error with an absolute floor of 1, so gradients near zero are
/// compared absolutely.
fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Checks d(loss)/d(param) for every element of every parameter in `store`
/// against central finite differences with the given step. `loss_fn` must be
/// a deterministic function of the current store values; it is re-evaluated
/// under elementwise perturbations.
pub fn check_params(
    store: &ParamStore,
    loss_fn: impl Fn() -> Var,
    step: f64,
    rel_tol: f64,
) -> GradCheckReport {
    let loss = loss_fn();
    let grads = backward(&loss);
    let mut report = GradCheckReport::default();
    for (name, param) in store.iter() {
        let baseline = param.value().as_ref().clone();
        let zero = crate::Array::zeros(baseline.shape());
        let grad = grads.by_name(name).unwrap_or(&zero);
        for i in 0..baseline.len() {
            let mut plus = baseline.clone();
            plus.data_mut()[i] += step;
            param.set(plus);
            let f_plus = loss_fn().scalar_value();

            let mut minus = baseline.clone();
            minus.data_mut()[i] -= step;
            param.set(minus);
            let f_minus = loss_fn().scalar_value();

            param.set(baseline.clone());

            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = grad.data()[i];
            let err = rel_error(ad, fd);
            report.checked += 1;
            report.worst_rel_error = report.worst_rel_error.max(err);
            if err > rel_tol {
                report.mismatches.push(GradMismatch {
                    param: name.to_string(),
                    index: i,
                    autodiff: ad,
                    finite_diff: fd,
                    rel_error: err,
                });
            }
        }
    }
    report
}
