//! Central finite-difference oracles for gradient verification.
//!
//! The differencing runs the *forward* pass twice per coordinate and never
//! touches [`Tape::backward`](super::Tape::backward), so it stays an
//! independent check of the reverse-mode path.

use super::params::{ParamId, ParameterStore};

/// Step size for central differences at 64-bit precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative tolerance for gradient agreement.
pub const REL_TOL: f64 = 1e-4;
/// Relaxed tolerance where the analytic gradient is nearly zero.
pub const REL_TOL_TINY: f64 = 1e-2;
/// Magnitude below which the relaxed tolerance applies.
pub const TINY_ANALYTIC: f64 = 1e-6;
/// Absolute floor covering pure floating-point noise around zero.
pub const ABS_FLOOR: f64 = 1e-9;

/// Central difference of `f` with respect to one coordinate of a parameter.
/// Restores the original value afterwards.
pub fn central_diff_param(
    store: &mut ParameterStore,
    id: ParamId,
    idx: usize,
    h: f64,
    mut f: impl FnMut(&ParameterStore) -> f64,
) -> f64 {
    let original = store.value(id)[idx];
    store.value_mut(id)[idx] = original + h;
    let plus = f(store);
    store.value_mut(id)[idx] = original - h;
    let minus = f(store);
    store.value_mut(id)[idx] = original;
    (plus - minus) / (2.0 * h)
}

/// Central difference of `f` with respect to one coordinate of a plain
/// input vector.
pub fn central_diff_input(
    input: &mut [f64],
    idx: usize,
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let original = input[idx];
    input[idx] = original + h;
    let plus = f(input);
    input[idx] = original - h;
    let minus = f(input);
    input[idx] = original;
    (plus - minus) / (2.0 * h)
}

/// Whether an analytic gradient agrees with its finite-difference estimate
/// under the spec tolerances: relative error <= 1e-4, relaxed to 1e-2 when
/// `|analytic| < 1e-6`, with an absolute floor for values at rounding noise.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        return true;
    }
    let tol = if analytic.abs() < TINY_ANALYTIC { REL_TOL_TINY } else { REL_TOL };
    diff <= tol * analytic.abs().max(numeric.abs())
}

/// Panic with coordinates on the first disagreement between analytic and
/// numeric gradients.
pub fn assert_grads_agree(analytic: &[f64], numeric: &[f64], label: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{label}: gradient length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(
            grads_agree(a, n),
            "{label}: gradient mismatch at index {i}: analytic {a}, numeric {n}"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_square() {
        let mut store = ParameterStore::new();
        let id = store.register("x", &[1], vec![3.0]).unwrap();
        let d = central_diff_param(&mut store, id, 0, 1e-6, |s| {
            let x = s.value(id)[0];
            x * x
        });
        assert!((d - 6.0).abs() < 1e-6);
        assert_eq!(store.value(id)[0], 3.0);
    }

    #[test]
    fn agreement_rule_behaves() {
        assert!(grads_agree(1.0, 1.00005));
        assert!(!grads_agree(1.0, 1.01));
        // tiny analytic values get the relaxed tolerance
        assert!(grads_agree(1e-8, 1.0099e-8));
        // and pure noise near zero passes on the absolute floor
        assert!(grads_agree(0.0, 1e-10));
    }
}
