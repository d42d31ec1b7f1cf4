//! Finite-difference gradient verification support, used by the test suites.

use ndarray::ArrayD;

/// Central finite-difference gradient of a scalar function of one array.
pub fn finite_difference(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    at: &ArrayD<f64>,
    eps: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(at.raw_dim());
    let mut probe = at.clone();
    let n = at.len();
    for i in 0..n {
        let idx = linear_to_index(at, i);
        let orig = probe[&idx[..]];
        probe[&idx[..]] = orig + eps;
        let up = f(&probe);
        probe[&idx[..]] = orig - eps;
        let down = f(&probe);
        probe[&idx[..]] = orig;
        grad[&idx[..]] = (up - down) / (2.0 * eps);
    }
    grad
}

fn linear_to_index(a: &ArrayD<f64>, mut i: usize) -> Vec<usize> {
    let shape = a.shape();
    let mut idx = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = i % shape[d];
        i /= shape[d];
    }
    idx
}

/// Relative error between analytic and finite-difference gradients,
/// `||a - b|| / max(||a||, ||b||, tiny)`.
pub fn relative_error(analytic: &ArrayD<f64>, fd: &ArrayD<f64>) -> f64 {
    let diff = (analytic - fd).mapv(|v| v * v).sum().sqrt();
    let na = analytic.mapv(|v| v * v).sum().sqrt();
    let nb = fd.mapv(|v| v * v).sum().sqrt();
    diff / na.max(nb).max(1e-12)
}
