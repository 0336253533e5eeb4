//! Central-difference verification of analytic gradients.

use crate::diffcore::rng::RngStream;
use crate::error::CoreError;

/// Coordinates probed per check when the parameter vector is larger; the
/// subset is drawn without replacement from the supplied stream.
pub const MIN_PROBED_COORDS: usize = 32;

/// Compare `analytic` against central differences of `loss_fn` on a random
/// coordinate subset (everything, if `params` has ≤ `max_coords` entries).
/// Returns the max of |analytic − numeric| / max(1e−12, |analytic| + |numeric|).
///
/// `params` is perturbed in place during probing and restored before return.
pub fn grad_check(
    mut loss_fn: impl FnMut(&[f64]) -> f64,
    params: &mut [f64],
    analytic: &[f64],
    probe_eps: f64,
    rng: &mut RngStream,
    max_coords: usize,
) -> Result<f64, CoreError> {
    if !(probe_eps > 0.0 && probe_eps <= 1e-2) {
        return Err(CoreError::contract("grad_check probe_eps must be in (0, 1e-2]"));
    }
    if analytic.len() != params.len() {
        return Err(CoreError::LengthMismatch {
            context: "grad_check analytic gradient",
            expected: params.len(),
            actual: analytic.len(),
        });
    }

    let n = params.len();
    let budget = max_coords.max(MIN_PROBED_COORDS).min(n);
    let coords: Vec<usize> = if budget == n {
        (0..n).collect()
    } else {
        let mut all = rng.permutation(n);
        all.truncate(budget);
        all
    };

    let mut max_rel = 0.0f64;
    for &i in &coords {
        let saved = params[i];
        params[i] = saved + probe_eps;
        let plus = loss_fn(params);
        params[i] = saved - probe_eps;
        let minus = loss_fn(params);
        params[i] = saved;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoreError::NonFiniteProbe { coord: i });
        }
        let numeric = (plus - minus) / (2.0 * probe_eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
