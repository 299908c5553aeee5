//! Central finite-difference gradients, used to audit analytic backward passes.

use super::params::{Gradients, LossGraph, ParamStore, evaluate};
use crate::error::Result;

/// Numerical gradient of a scalar loss graph by central differences.
pub fn finite_difference<G: LossGraph>(graph: &G, store: &ParamStore, h: f64) -> Result<Gradients> {
    let mut grads = store.zero_grads();
    let mut probe = store.clone();
    for p in store.params() {
        for i in 0..p.numel() {
            let orig = p.value[i];
            probe.get_mut(&p.name)[i] = orig + h;
            let plus = evaluate(graph, &probe)?;
            probe.get_mut(&p.name)[i] = orig - h;
            let minus = evaluate(graph, &probe)?;
            probe.get_mut(&p.name)[i] = orig;
            grads.slot(&p.name)[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over all parameters, 0 when both vanish.
pub fn relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let a = analytic.flatten();
    let n = numeric.flatten();
    let diff: f64 = a.iter().zip(&n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
