//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward closure it checks.

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Perturbation used by the central difference.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale: with an
/// O(1) loss and the default step, round-off in the central difference is
/// around 1e-11, which would swamp a purely relative comparison.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the analytic gradient of `loss_fn` w.r.t. `ids` against central
/// differences with step `h`. `loss_fn` must build a scalar on the given graph.
///
/// The store's gradients are zeroed before and left holding the analytic
/// gradient afterwards.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    store.zero_grad();
    {
        let g = Graph::new();
        let loss = loss_fn(&g, store)?;
        g.backward(loss, store)?;
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        Ok(loss_fn(&g, store)?.item())
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &id in ids {
        let n = store.value(id).numel();
        for i in 0..n {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.grad(id).data()[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name().to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Checks every trainable parameter in the store.
pub fn check_all<F>(store: &mut ParamStore, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    check_params(store, &ids, h, loss_fn)
}
