//! Central finite-difference checks against the reverse pass.

use crate::params::{Grads, ParamId, ParamStore};

/// Per-parameter comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, or 0 when both vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares `analytic` with central differences of `loss` for every entry of
/// every parameter in `store`.
pub fn check_params(
    store: &ParamStore,
    analytic: &Grads,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<GroupError> {
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let mut num = vec![0.0; n];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = work.get(id).data[i];
            work.get_mut(id).data[i] = orig + step;
            let plus = loss(&work);
            work.get_mut(id).data[i] = orig - step;
            let minus = loss(&work);
            work.get_mut(id).data[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let an = &analytic.get(id).data;
        let diff: f64 = an.iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = an.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel_error = if denom < 1e-12 { diff } else { diff / denom };
        out.push(GroupError { name: store.name(id).to_string(), rel_error, analytic_norm: na });
    }
    out
}

pub fn max_rel_error(errors: &[GroupError]) -> f64 {
    errors.iter().map(|e| e.rel_error).fold(0.0, f64::max)
}
