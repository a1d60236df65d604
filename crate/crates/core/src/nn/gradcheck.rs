//! Central finite-difference gradient verification.

use serde::Serialize;

use super::params::{Grads, ParamStore};

pub const EPS: f64 = 1e-5;
/// Denominator floor so near-zero gradients do not inflate relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub label: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares `loss_and_grad` against central differences for every parameter
/// group. `max_per_param` limits checked entries to an evenly spaced subset.
pub fn check<F>(label: &str, store: &ParamStore, max_per_param: Option<usize>, loss_and_grad: F) -> GradcheckReport
where
    F: Fn(&ParamStore) -> (f64, Grads),
{
    let (_, analytic) = loss_and_grad(store);
    let mut probe = store.clone();
    let mut params = Vec::new();
    let mut overall: f64 = 0.0;
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = probe.value(id)[i];
            probe.value_mut(id)[i] = orig + EPS;
            let up = loss_and_grad(&probe).0;
            probe.value_mut(id)[i] = orig - EPS;
            let down = loss_and_grad(&probe).0;
            probe.value_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(relative_error(analytic.get(id)[i], numeric));
            checked += 1;
        }
        overall = overall.max(worst);
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            checked,
            max_rel_error: worst,
        });
    }
    GradcheckReport {
        label: label.to_string(),
        params,
        max_rel_error: overall,
    }
}
