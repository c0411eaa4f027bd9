use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of `f` at `x`.
///
/// Used as an independent oracle for the reverse sweep.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step {h} must be > 0")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function evaluation at coordinate {i} gave {plus} / {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_gradient(|_| Ok(4.2), &[1.0, -3.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let g = finite_difference_gradient(
            |x| Ok(x.iter().map(|v| v * v).sum()),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        assert!(finite_difference_gradient(|_| Ok(0.0), &[1.0], 0.0).is_err());
        assert!(finite_difference_gradient(|x| Ok(x[0].ln()), &[0.0], 1e-3).is_err());
    }
}
