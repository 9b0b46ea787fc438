//! Finite-difference gradient verification.
//!
//! The checker is the independent oracle for every differentiable kernel:
//! it compares the analytic gradient produced by the tape against central
//! differences `(f(x+h) - f(x-h)) / 2h`, one coordinate at a time, at 64-bit
//! precision.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_H: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar-valued differentiable function of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, &coords, h)
}

/// Same oracle restricted to a subset of coordinates (for large parameter
/// tensors where probing every entry is wasteful).
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, coords: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::param(x.data().to_vec(), x.shape())?;
    let y = f(&leaf)?;
    if y.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_err = 0.0f64;
    let base = x.data().to_vec();
    for &i in coords {
        if i >= base.len() {
            return Err(Error::Contract(format!(
                "grad_check coordinate {i} out of range for {} elements",
                base.len()
            )));
        }
        let numeric = no_grad(|| -> Result<f64> {
            let mut plus = base.clone();
            plus[i] += h;
            let fp = f(&Tensor::new(plus, x.shape())?)?.item();
            let mut minus = base.clone();
            minus[i] -= h;
            let fm = f(&Tensor::new(minus, x.shape())?)?.item();
            Ok((fp - fm) / (2.0 * h))
        })?;
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn sum_has_exactly_zero_error() {
        // integer data and h = 0.5 keep every difference exact in binary
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let err = grad_check(|t| Ok(ops::sum_all(t)), &x, 0.5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_sum_of_squares() {
        let x = Tensor::<f64>::new(
            vec![0.31, -1.2, 0.8, 2.1, -0.45, 0.02, 1.4, -0.9],
            &[8],
        )
        .unwrap();
        let err = grad_check(
            |t| {
                let s = ops::softmax(t, 0)?;
                Ok(ops::sum_all(&ops::mul(&s, &s)?))
            },
            &x,
            DEFAULT_H,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn non_scalar_function_is_a_contract_error() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap();
        assert!(grad_check(|t| Ok(ops::relu(t)), &x, DEFAULT_H).is_err());
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        // A deliberately wrong backward (claims d/dx sum(x*x) = 3x) must be
        // flagged by the checker.
        fn bad_square_sum(x: &Tensor<f64>) -> Tensor<f64> {
            let total: f64 = x.data().iter().map(|v| v * v).sum();
            Tensor::from_op(
                vec![total],
                Vec::new(),
                vec![x.clone()],
                Box::new(|args| {
                    let xd = args.parents[0].data();
                    vec![Some(xd.iter().map(|v| 3.0 * v * args.out_grad[0]).collect())]
                }),
            )
        }
        let x = Tensor::<f64>::new(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let err = grad_check(|t| Ok(bad_square_sum(t)), &x, DEFAULT_H).unwrap();
        assert!(err > 1e-2, "corrupted rule slipped through: {err}");
    }
}
