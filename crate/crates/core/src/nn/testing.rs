//! Finite-difference helpers shared by the unit tests.

pub(crate) const FD_STEP: f64 = 1e-5;

/// Central difference of `f` around zero offset.
pub(crate) fn central_diff(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Relative error with a small absolute floor so near-zero gradients compare sensibly.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
