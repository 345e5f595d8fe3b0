//! Central finite-difference oracle for tape gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`. The function is
/// rebuilt on a fresh tape for every evaluation, so it must be deterministic.
///
/// ```
/// use fairdd::{finite_diff_check, Tensor};
///
/// let x = Tensor::vector(vec![0.3, -0.7, 0.1]).unwrap();
/// let err = finite_diff_check(
///     |tape, x| {
///         let zero = tape.constant(Tensor::zeros(&[3]));
///         tape.mse(x, zero)
///     },
///     &x,
///     1e-5,
/// )
/// .unwrap();
/// assert!(err < 1e-8);
/// ```
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tape, Var) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::domain("finite_diff_check", "step must be positive"));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x);
        let out = f(&tape, xv)?;
        let grads = tape.backward(out)?;
        grads
            .get(xv)
            .ok_or_else(|| TensorError::Internal("input leaf lost its gradient".into()))?
            .data()
            .to_vec()
    };
    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let xv = tape.constant(t);
        let out = f(&tape, xv)?;
        tape.item(out).and_then(|v| {
            if tape.shape(out).is_empty() {
                Ok(v)
            } else {
                Err(TensorError::NotScalar(tape.shape(out)))
            }
        })
    };
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mse_against_zero() {
        let x = uniform(8, 1);
        let err = finite_diff_check(
            |t, x| {
                let z = t.constant(Tensor::zeros(&[8]));
                t.mse(x, z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = uniform(5, 2);
        let err = finite_diff_check(
            |t, x| {
                let s = t.scalar_mul(x, 3.0)?;
                t.sum_all(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_logits() {
        let x = uniform(4, 3).reshape(vec![1, 4]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let target = t.constant(Tensor::new(vec![1, 4], vec![0., 0., 1., 0.]).unwrap());
                t.softmax_cross_entropy(x, target)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = uniform(3, 4);
        let err = finite_diff_check(|t, x| t.scalar_mul(x, 2.0), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar(_)));
    }
}
