//! Central-difference gradient oracle shared by unit tests.

use super::{Gradients, ParamId, ParamStore};

/// Worst per-tensor relative error `|a - n| / max(|a|, |n|)` over `ids`,
/// where `n` is the five-point central difference of `loss` and `a` the analytic
/// gradient (missing gradients are zeros).
pub fn max_relative_error(
    ps: &ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let eps = 1e-5;
    let mut work = ps.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let (rows, cols) = ps.get(id).dim();
        let ana_m = analytic.param(id).map(|g| g.as_standard_layout().into_owned());
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for k in (0..rows).flat_map(|r| (0..cols).map(move |c| [r, c])) {
            let base = ps.get(id)[k];
            let mut at = |d: f64| {
                work.get_mut(id)[k] = base + d;
                loss(&work)
            };
            let num = (at(-2.0 * eps) - 8.0 * at(-eps) + 8.0 * at(eps) - at(2.0 * eps)) / (12.0 * eps);
            work.get_mut(id)[k] = base;
            let ana = ana_m.as_ref().map(|g| g[k]).unwrap_or(0.0);
            diff2 += (num - ana).powi(2);
            a2 += ana * ana;
            n2 += num * num;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 1e-9 {
            worst = worst.max(diff2.sqrt() / scale);
        } else {
            worst = worst.max(diff2.sqrt());
        }
    }
    worst
}
