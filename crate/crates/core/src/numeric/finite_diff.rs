use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        grad.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest absolute deviation between two gradients, divided by the larger of
/// their sup-norms (or `floor`, whichever is bigger).
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_diff = 0.0f64;
    let mut scale = floor;
    for (&a, &n) in analytic.iter().zip(numeric) {
        max_diff = max_diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    max_diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Matrix::row_vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|m| m.as_slice().iter().map(|v| v * v).sum(), &x, DEFAULT_STEP)
            .unwrap();
        assert!((g.as_slice()[0] - 2.0).abs() < 1e-8);
        assert!((g.as_slice()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Matrix::row_vector(vec![0.3, -7.0, 2.0]);
        let g = finite_diff_grad(|_| 5.0, &x, DEFAULT_STEP).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_rule() {
        let x = Matrix::row_vector(vec![3.0, 5.0]);
        let g = finite_diff_grad(|m| m.as_slice()[0] * m.as_slice()[1], &x, DEFAULT_STEP).unwrap();
        assert!((g.as_slice()[0] - 5.0).abs() < 1e-8);
        assert!((g.as_slice()[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Matrix::row_vector(vec![0.0]);
        let err = finite_diff_grad(|m| 1.0 / m.as_slice()[0].abs().min(1e-400), &x, 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }
}
