use crate::error::{Error, Result};

/// Central finite-difference gradient of a scalar function.
///
/// Coordinate `i` is `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`. Any non-finite
/// evaluation aborts with a numeric error naming the coordinate.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::argument("fd_gradient", format!("step h = {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(
                "fd_gradient",
                format!("non-finite objective around coordinate {i}"),
            ));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, defined as 0 when both are (near) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = fd_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = fd_gradient(|_| Ok(2.5), &[1.0, -4.0, 0.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let r = fd_gradient(|x| Ok(x[0].ln()), &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(fd_gradient(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }
}
