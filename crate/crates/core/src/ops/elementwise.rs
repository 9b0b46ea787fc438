//! Elementwise and broadcast arithmetic, plus the two activations.

use super::{broadcast_shapes, for_each_broadcast2, reduce_to_shape};
use crate::error::Result;
use crate::parallel::chunks_mut_indexed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const ELEMWISE_CHUNK: usize = 8 * 1024;

fn map_unary<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    chunks_mut_indexed(&mut out, ELEMWISE_CHUNK, |ci, chunk| {
        let base = ci * ELEMWISE_CHUNK;
        for (i, o) in chunk.iter_mut().enumerate() {
            *o = f(x[base + i]);
        }
    });
    out
}

fn binary_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T + Sync,
) -> Result<(Vec<T>, Vec<usize>)> {
    let shape = broadcast_shapes(a.shape(), b.shape())?;
    let len: usize = shape.iter().product();
    let mut out = vec![T::ZERO; len];
    if a.shape() == b.shape() {
        let (ad, bd) = (a.data(), b.data());
        chunks_mut_indexed(&mut out, ELEMWISE_CHUNK, |ci, chunk| {
            let base = ci * ELEMWISE_CHUNK;
            for (i, o) in chunk.iter_mut().enumerate() {
                *o = f(ad[base + i], bd[base + i]);
            }
        });
    } else {
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast2(&shape, a.shape(), b.shape(), |o, ia, ib| {
            out[o] = f(ad[ia], bd[ib]);
        });
    }
    Ok((out, shape))
}

/// `a + b` with NumPy-style broadcasting.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, shape) = binary_broadcast(a, b, |x, y| x + y)?;
    Ok(Tensor::from_op(
        out,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|args| {
            let a = &args.parents[0];
            let b = &args.parents[1];
            vec![
                a.requires_grad()
                    .then(|| reduce_to_shape(args.out_grad, args.out_shape, a.shape())),
                b.requires_grad()
                    .then(|| reduce_to_shape(args.out_grad, args.out_shape, b.shape())),
            ]
        }),
    ))
}

/// `a - b` with broadcasting.
pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, shape) = binary_broadcast(a, b, |x, y| x - y)?;
    Ok(Tensor::from_op(
        out,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|args| {
            let a = &args.parents[0];
            let b = &args.parents[1];
            let db = b.requires_grad().then(|| {
                let mut g = reduce_to_shape(args.out_grad, args.out_shape, b.shape());
                for v in &mut g {
                    *v = -*v;
                }
                g
            });
            vec![
                a.requires_grad()
                    .then(|| reduce_to_shape(args.out_grad, args.out_shape, a.shape())),
                db,
            ]
        }),
    ))
}

/// Elementwise `a * b` with broadcasting.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, shape) = binary_broadcast(a, b, |x, y| x * y)?;
    Ok(Tensor::from_op(
        out,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|args| {
            let a = &args.parents[0];
            let b = &args.parents[1];
            let da = a.requires_grad().then(|| {
                let mut prod = vec![T::ZERO; args.out_grad.len()];
                let bd = b.data();
                for_each_broadcast2(args.out_shape, a.shape(), b.shape(), |o, _, ib| {
                    prod[o] = args.out_grad[o] * bd[ib];
                });
                reduce_to_shape(&prod, args.out_shape, a.shape())
            });
            let db = b.requires_grad().then(|| {
                let mut prod = vec![T::ZERO; args.out_grad.len()];
                let ad = a.data();
                for_each_broadcast2(args.out_shape, a.shape(), b.shape(), |o, ia, _| {
                    prod[o] = args.out_grad[o] * ad[ia];
                });
                reduce_to_shape(&prod, args.out_shape, b.shape())
            });
            vec![da, db]
        }),
    ))
}

pub fn neg<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    scale(x, -1.0)
}

/// Multiply by a constant.
pub fn scale<T: Scalar>(x: &Tensor<T>, factor: f64) -> Tensor<T> {
    let c = T::from_f64(factor);
    let out = map_unary(x.data(), |v| v * c);
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |args| {
            vec![Some(args.out_grad.iter().map(|&g| g * c).collect())]
        }),
    )
}

/// `max(0, x)`; the subgradient at 0 is taken as 0.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out = map_unary(x.data(), |v| v.maximum(T::ZERO));
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|args| {
            let xd = args.parents[0].data();
            vec![Some(
                args.out_grad
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect(),
            )]
        }),
    )
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF (erf form, no tanh
/// approximation).
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out = map_unary(x.data(), |v| v * v.norm_cdf());
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|args| {
            let xd = args.parents[0].data();
            vec![Some(
                args.out_grad
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| g * (v.norm_cdf() + v * v.norm_pdf()))
                    .collect(),
            )]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn relu_values() {
        let y = relu(&t64(&[-1.0, 2.0, 0.0], &[3]));
        assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&t64(&[0.0, 1.0], &[2]));
        assert_eq!(y.data()[0], 0.0);
        // 1 * Phi(1) with Phi the standard normal CDF
        assert!((y.data()[1] - 0.8413447).abs() < 1e-6);
    }

    #[test]
    fn broadcast_add_row_over_matrix() {
        let m = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let row = t64(&[10.0, 20.0, 30.0], &[3]);
        let y = add(&m, &row).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_add_backward_reduces() {
        let m = Tensor::<f64>::param(vec![0.0; 6], &[2, 3]).unwrap();
        let row = Tensor::<f64>::param(vec![0.0; 3], &[3]).unwrap();
        let loss = crate::ops::sum_all(&add(&m, &row).unwrap());
        loss.backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(row.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn mul_broadcast_backward() {
        let a = Tensor::<f64>::param(vec![2.0, 3.0], &[2, 1]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0, 7.0, 11.0], &[3]).unwrap();
        let loss = crate::ops::sum_all(&mul(&a, &b).unwrap());
        loss.backward().unwrap();
        // d/da_i = sum(b), d/db_j = sum(a)
        assert_eq!(a.grad().unwrap(), vec![23.0, 23.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = t64(&[1.0, 2.0], &[2]);
        let b = t64(&[1.0, 2.0, 3.0], &[3]);
        assert!(add(&a, &b).is_err());
    }
}
