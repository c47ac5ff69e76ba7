use crate::numcore::Matrix;

/// Central-difference gradient of `f` at `x`.
///
/// Each entry is perturbed by `±h` in `f32`; the realized step
/// `(x + h) − (x − h)` is used as the denominator so rounding of the
/// perturbation itself does not bias the estimate.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f32) -> Matrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        let plus = orig + h;
        let minus = orig - h;
        probe.data_mut()[i] = plus;
        let f_plus = f(&probe);
        probe.data_mut()[i] = minus;
        let f_minus = f(&probe);
        probe.data_mut()[i] = orig;
        let step = f64::from(plus) - f64::from(minus);
        grad.data_mut()[i] = ((f_plus - f_minus) / step) as f32;
    }
    grad
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(floor)
}
