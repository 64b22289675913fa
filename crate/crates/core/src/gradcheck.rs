//! Central finite-difference comparison against the tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::ParamStore;

/// Entries whose analytic and numeric gradients are both below this are
/// compared by absolute difference.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Largest `|numeric - analytic| / max(|numeric|, |analytic|, RELATIVE_FLOOR)`
/// over every entry of every parameter. `build` must construct the same
/// scalar loss on whatever store the graph is bound to.
pub fn max_relative_error<F>(store: &ParamStore<f64>, h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = build(&mut g)?;
        Ok(g.value(l).item())
    };
    let grads = {
        let mut g = Graph::new(store);
        let l = build(&mut g)?;
        g.backward(l)?
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        for e in 0..store.get(id).len() {
            let orig = store.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig;
            let num = (up - down) / (2.0 * h);
            let an = grads.param(id).map_or(0.0, |g| g.data()[e]);
            let err = (num - an).abs() / num.abs().max(an.abs()).max(RELATIVE_FLOOR);
            if !err.is_finite() {
                return Err(Error::TrainingDiverged);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
