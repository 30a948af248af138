use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_grad", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries that are zero up to finite-difference round-off
/// from dominating the ratio.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_sum_is_flat() {
        let x = Tensor::new([1, 4], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(ops::softmax_rows(t)?.sum()), &x, 1e-5).unwrap();
        assert!(g.max_abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| Ok(t.item()), &x, 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }
}
