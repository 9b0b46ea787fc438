//! Differentiable kernel operations on [`Tensor`].
//!
//! Each op computes its forward value into fresh storage and, when gradients
//! are being recorded, attaches a backward rule returning one gradient buffer
//! per input. Reductions run in a fixed order per output element, so forward
//! and backward are reproducible for any thread count.

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
mod shape_ops;

pub use conv::{conv2d, conv_output_extent, maxpool2d};
pub use elementwise::{add, gelu, mul, neg, relu, scale, sub};
pub use matmul::{linear, matmul};
pub use norm::{layernorm, softmax};
pub use reduce::{mean_all, sum_all};
pub use shape_ops::{broadcast_to, concat, narrow, permute, reshape};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major strides (in elements) for a shape.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for (s, &dim) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= dim;
    }
    strides
}

/// NumPy-style broadcast of two shapes (aligned at the trailing axis).
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides into a buffer of shape `shape` when indexed by `out_shape`
/// coordinates; broadcast axes get stride zero.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0usize; out_shape.len()];
    for (i, (&dim, &stride)) in shape.iter().zip(&own).enumerate() {
        strides[offset + i] = if dim == 1 { 0 } else { stride };
    }
    strides
}

/// Visit every coordinate of `out_shape` in row-major order, passing the
/// linear offsets into two broadcast input buffers.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let ndim = out_shape.len();
    let mut index = vec![0usize; ndim];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for lin in 0..total {
        f(lin, ia, ib);
        for axis in (0..ndim).rev() {
            index[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            ia -= sa[axis] * out_shape[axis];
            ib -= sb[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

/// Sum a gradient of `from_shape` down to `to_shape` (the broadcast inverse).
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    from_shape: &[usize],
    to_shape: &[usize],
) -> Vec<T> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let to_len: usize = to_shape.iter().product();
    let mut out = vec![T::ZERO; to_len];
    let strides = broadcast_strides(to_shape, from_shape);
    let ndim = from_shape.len();
    let mut index = vec![0usize; ndim];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for axis in (0..ndim).rev() {
            index[axis] += 1;
            off += strides[axis];
            if index[axis] < from_shape[axis] {
                break;
            }
            off -= strides[axis] * from_shape[axis];
            index[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[3, 1], &[2, 1, 4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shapes(&[3], &[4]).is_err());
    }

    #[test]
    fn reduce_inverts_broadcast() {
        // [2,3] summed back to [3]
        let grad = [1.0f64, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[3]), vec![11.0, 22.0, 33.0]);
        // and back to [1] via [2,3] -> []
        assert_eq!(reduce_to_shape(&grad, &[2, 3], &[]), vec![66.0]);
    }
}
