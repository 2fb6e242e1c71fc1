//! Central finite differences for checking analytic gradients.

use crate::linalg::Matrix;

/// Entrywise central difference of `loss` around `at` with step `h`.
///
/// `loss` receives a perturbed copy of `at`; every other parameter is held
/// fixed by the caller's closure.
pub fn central_difference<F>(at: &Matrix, h: f64, mut loss: F) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.nrows(), at.ncols());
    for idx in 0..at.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = loss(&probe);
        probe[idx] = orig - h;
        let minus = loss(&probe);
        probe[idx] = orig;
        out[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

/// `‖a - b‖_F / max(‖b‖_F, floor)`.
pub fn relative_frobenius(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}
