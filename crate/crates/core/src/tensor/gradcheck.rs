//! Finite-difference gradient verification.
//!
//! The reference side is a central difference of a scalar-valued closure,
//! evaluated entirely in f64 — it never touches the reverse-mode code it
//! checks. Kernels are generic over the element type, so the analytic side is
//! instantiated at f64 too; training keeps its f32 path.

/// Central difference `(f(x+ε e_i) − f(x−ε e_i)) / 2ε` for one coordinate.
pub fn central_diff_at(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, epsilon: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[i] = x[i] + epsilon;
    let hi = f(&probe);
    probe[i] = x[i] - epsilon;
    let lo = f(&probe);
    (hi - lo) / (2.0 * epsilon)
}

/// Full central-difference gradient of `f` at `x`.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], epsilon: f64) -> Vec<f64> {
    (0..x.len()).map(|i| central_diff_at(f, x, i, epsilon)).collect()
}

/// Worst relative disagreement between two gradients. Differences below 1e-9
/// in absolute terms count as agreement, so near-zero components cannot
/// manufacture spurious relative error.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| {
            let diff = (a - r).abs();
            if diff < 1e-9 {
                0.0
            } else {
                diff / a.abs().max(r.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Compares an analytic gradient against central differences of `f` at `x`;
/// returns the max relative error over all coordinates.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "probe/gradient length mismatch");
    let reference = central_diff_grad(f, x, epsilon);
    max_relative_error(analytic, &reference)
}
