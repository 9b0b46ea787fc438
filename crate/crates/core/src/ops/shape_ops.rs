//! Layout-changing operations: reshape, axis permutation, slicing, concat
//! and explicit broadcasting. All of them copy into fresh storage.

use super::{broadcast_shapes, broadcast_strides, contiguous_strides, reduce_to_shape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Same data, new extents (must preserve the element count).
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.len() {
        return Err(Error::Shape(format!(
            "cannot reshape {:?} ({} elements) to {:?}",
            x.shape(),
            x.len(),
            shape
        )));
    }
    Ok(Tensor::from_op(
        x.data().to_vec(),
        shape.to_vec(),
        vec![x.clone()],
        Box::new(|args| vec![Some(args.out_grad.to_vec())]),
    ))
}

/// Reorder axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let ndim = x.ndim();
    let mut seen = vec![false; ndim];
    if axes.len() != ndim || axes.iter().any(|&a| a >= ndim || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Shape(format!(
            "invalid permutation {:?} for shape {:?}",
            axes,
            x.shape()
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let out = permute_copy(x.data(), x.shape(), axes);
    let axes_owned = axes.to_vec();
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![x.clone()],
        Box::new(move |args| {
            // Inverse permutation routes the gradient back.
            let mut inverse = vec![0usize; axes_owned.len()];
            for (i, &a) in axes_owned.iter().enumerate() {
                inverse[a] = i;
            }
            vec![Some(permute_copy(args.out_grad, args.out_shape, &inverse))]
        }),
    ))
}

fn permute_copy<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::ZERO; data.len()];
    let ndim = out_shape.len();
    let mut index = vec![0usize; ndim];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for axis in (0..ndim).rev() {
            index[axis] += 1;
            src += gather_strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            src -= gather_strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    out
}

/// Contiguous slice `start..start+len` along one axis.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() || start + len > x.shape()[axis] || len == 0 {
        return Err(Error::Shape(format!(
            "narrow(axis={axis}, start={start}, len={len}) out of bounds for {:?}",
            x.shape()
        )));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let dim = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    let data = x.data();
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![x.clone()],
        Box::new(move |args| {
            let p = &args.parents[0];
            let mut grad = vec![T::ZERO; p.len()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                grad[dst..dst + len * inner]
                    .copy_from_slice(&args.out_grad[src..src + len * inner]);
            }
            vec![Some(grad)]
        }),
    ))
}

/// Concatenate along an axis; all other extents must agree.
pub fn concat<T: Scalar>(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    if axis >= first.ndim() {
        return Err(Error::Shape(format!(
            "concat axis {axis} out of range for {:?}",
            first.shape()
        )));
    }
    let mut axis_total = 0usize;
    for t in tensors {
        let mut expect = first.shape().to_vec();
        expect[axis] = t.shape().get(axis).copied().unwrap_or(0);
        if t.shape() != expect {
            return Err(Error::Shape(format!(
                "concat operand {:?} incompatible with {:?} along axis {axis}",
                t.shape(),
                first.shape()
            )));
        }
        axis_total += t.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for t in tensors {
            let dim = t.shape()[axis];
            let base = o * dim * inner;
            out.extend_from_slice(&t.data()[base..base + dim * inner]);
        }
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let dims: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    Ok(Tensor::from_op(
        out,
        out_shape,
        tensors.to_vec(),
        Box::new(move |args| {
            let mut grads: Vec<Option<Vec<T>>> = args
                .parents
                .iter()
                .map(|p| p.requires_grad().then(|| vec![T::ZERO; p.len()]))
                .collect();
            for o in 0..outer {
                let mut src = o * axis_total * inner;
                for (gi, &dim) in dims.iter().enumerate() {
                    if let Some(g) = grads[gi].as_mut() {
                        let dst = o * dim * inner;
                        g[dst..dst + dim * inner]
                            .copy_from_slice(&args.out_grad[src..src + dim * inner]);
                    }
                    src += dim * inner;
                }
            }
            grads
        }),
    ))
}

/// Materialize a broadcast view; the gradient sums over stretched axes.
pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out_shape = broadcast_shapes(x.shape(), shape)?;
    if out_shape != shape {
        return Err(Error::Shape(format!(
            "cannot broadcast {:?} to {:?}",
            x.shape(),
            shape
        )));
    }
    let total: usize = shape.iter().product();
    let strides = broadcast_strides(x.shape(), shape);
    let mut out = vec![T::ZERO; total];
    let data = x.data();
    let ndim = shape.len();
    let mut index = vec![0usize; ndim];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for axis in (0..ndim).rev() {
            index[axis] += 1;
            src += strides[axis];
            if index[axis] < shape[axis] {
                break;
            }
            src -= strides[axis] * shape[axis];
            index[axis] = 0;
        }
    }
    Ok(Tensor::from_op(
        out,
        shape.to_vec(),
        vec![x.clone()],
        Box::new(|args| {
            let p = &args.parents[0];
            vec![Some(reduce_to_shape(args.out_grad, args.out_shape, p.shape()))]
        }),
    ))
}
