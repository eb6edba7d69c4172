//! Central finite differences over a parameter store.
//!
//! Only ever evaluates the forward loss, so it is an independent check on
//! [`Tape::backward`](super::Tape::backward).

use super::tape::{ParamId, ParamStore};
use crate::error::Result;

/// Numerical gradient of `loss` with respect to every scalar in the listed
/// parameters, using step `h`. Evaluated in place: each entry is perturbed
/// and restored.
pub fn numerical_grads(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f32,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<(ParamId, Vec<f64>)>> {
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.get(id).len();
        let mut g = Vec::with_capacity(n);
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = loss(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            g.push((up - down) / (2.0 * h as f64));
        }
        out.push((id, g));
    }
    Ok(out)
}

/// `|a - n| <= atol + rtol * max(|a|, |n|)`.
pub fn close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= atol + rtol * analytic.abs().max(numeric.abs())
}
