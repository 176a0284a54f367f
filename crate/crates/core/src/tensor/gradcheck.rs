use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of `loss_fn` at `params`, one coordinate at a time.
pub fn finite_diff_gradient<T, F>(mut loss_fn: F, params: &[Tensor<T>], h: f64) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![T::zero(); params[p].len()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = T::cast_from(orig.as_f64() + h);
            let plus = loss_fn(&work)?;
            work[p].data_mut()[i] = T::cast_from(orig.as_f64() - h);
            let minus = loss_fn(&work)?;
            work[p].data_mut()[i] = orig;
            *slot = T::cast_from((plus - minus) / (2.0 * h));
        }
        out.push(Tensor::new(params[p].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Worst-case disagreement between two gradient sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative: f64,
    pub max_absolute: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_relative < rel_tol
    }
}

/// Relative error `|a - n| / max(|a|, |n|)`, ignoring coordinates whose
/// absolute error is below `abs_floor`.
pub fn max_relative_error<T: Scalar>(
    analytic: &[Tensor<T>],
    numeric: &[Tensor<T>],
    abs_floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative: 0.0,
        max_absolute: 0.0,
        coordinates: 0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            let abs = (x - y).abs();
            report.coordinates += 1;
            report.max_absolute = report.max_absolute.max(abs);
            if abs <= abs_floor {
                continue;
            }
            let rel = abs / x.abs().max(y.abs());
            report.max_relative = report.max_relative.max(rel);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(
            |p: &[Tensor<f64>]| Ok(p[0].item() * p[0].item()),
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_gradient(
            |_: &[Tensor<f64>]| Ok(4.2),
            &[Tensor::from_vec(vec![1.0, -2.0, 0.5])],
            1e-4,
        )
        .unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let f = |_: &[Tensor<f64>]| Ok(0.0);
        assert!(finite_diff_gradient(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(finite_diff_gradient(f, &[Tensor::scalar(1.0)], -1e-3).is_err());
        assert!(finite_diff_gradient(f, &[Tensor::scalar(1.0)], f64::NAN).is_err());
    }

    #[test]
    fn relative_error_uses_floor() {
        let a = [Tensor::from_vec(vec![1.0, 1e-9])];
        let n = [Tensor::from_vec(vec![1.0 + 1e-6, 2e-9])];
        let r = max_relative_error(&a, &n, 1e-7);
        assert!((r.max_relative - 1e-6 / (1.0 + 1e-6)).abs() < 1e-12);
        assert!(r.passes(1e-4));
    }
}
