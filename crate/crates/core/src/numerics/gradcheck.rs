//! Central-difference gradient checking.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck<T> {
    pub max_relative_error: T,
    pub analytic: Tensor<T>,
    pub numeric: Tensor<T>,
}

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn numeric_gradient<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    point: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::argument("grad_check eps must be positive"));
    }
    let mut x = point.clone();
    let mut out = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = f(&x)?;
        x.data_mut()[i] = orig - eps;
        let minus = f(&x)?;
        x.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (eps + eps);
    }
    Ok(out)
}

/// Largest coordinate discrepancy, relative to the larger of the two
/// gradients' max-norms (floored at 1e-8).
pub fn compare_gradients<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> T {
    let scale = analytic
        .max_abs()
        .max(numeric.max_abs())
        .max(T::of(ABS_FLOOR));
    analytic.max_abs_diff(numeric) / scale
}

/// Checks the tape gradient of the scalar function built by `f` at `point`.
///
/// `f` receives a fresh tape and the input handle and returns the scalar
/// output; it is re-run on an inference tape for every finite difference.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    let numeric = numeric_gradient(
        |p| {
            let mut tape = Tape::inference();
            let x = tape.leaf(p.clone());
            let y = f(&mut tape, x)?;
            Ok(tape.value(y).data()[0])
        },
        point,
        eps,
    )?;
    Ok(GradCheck {
        max_relative_error: compare_gradients(&analytic, &numeric),
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mul, sum};

    #[test]
    fn quadratic_at_three() {
        let r = grad_check(
            |t, x| {
                let y = mul(t, x, x)?;
                Ok(sum(t, y))
            },
            &Tensor::scalar(3.0f64),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic.data(), &[6.0]);
        assert!(r.max_relative_error < 1e-9, "{}", r.max_relative_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_relative_error, 0.0);
        assert_eq!(r.analytic.max_abs(), 0.0);
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        let r = grad_check(|t, x| Ok(sum(t, x)), &Tensor::scalar(1.0f64), 0.0);
        assert!(r.is_err());
    }
}
