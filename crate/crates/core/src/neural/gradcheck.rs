//! Central finite-difference helpers for verifying analytic gradients.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::StandardNormal;

/// Step used by [`numeric_gradient`].
pub const FD_STEP: f64 = 1e-4;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient<D, F>(x: &Array<f64, D>, mut f: F) -> Array<f64, D>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>) -> f64,
{
    let mut probe = x.as_standard_layout().into_owned();
    let mut grad = Array::zeros(probe.raw_dim());
    let n = probe.len();
    for i in 0..n {
        let orig = probe.as_slice().expect("standard layout")[i];
        probe.as_slice_mut().expect("standard layout")[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = orig;
        grad.as_slice_mut().expect("standard layout")[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, taken as 0 when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Array of standard-normal samples.
pub fn randn<Sh: ShapeBuilder, R: Rng>(shape: Sh, rng: &mut R) -> Array<f64, Sh::Dim> {
    Array::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}
