//! Batched matrix product and the fused linear layer kernel.

use super::{broadcast_shapes, broadcast_strides};
use crate::error::{Error, Result};
use crate::parallel::chunks_mut_indexed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows per parallel chunk when splitting a single large gemm. Fixed so the
/// partitioning (and therefore every accumulation order) is independent of
/// the worker count.
const ROW_CHUNK: usize = 64;

/// Plain row-major gemm `c = a * b` where `a` is m x k and `b` is k x n.
/// Either operand can be a transposed view via its strides.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == T::ZERO {
            for v in c.iter_mut().take(m * n) {
                *v = T::ZERO;
            }
        }
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-chunked parallel gemm for contiguous row-major operands.
fn gemm_par<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_par_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, c)
}

#[allow(clippy::too_many_arguments)]
fn gemm_par_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
) {
    if m <= ROW_CHUNK {
        gemm_into(m, k, n, a, rsa, csa, b, rsb, csb, T::ZERO, c);
        return;
    }
    chunks_mut_indexed(c, ROW_CHUNK * n, |ci, chunk| {
        let row0 = ci * ROW_CHUNK;
        let rows = chunk.len() / n;
        let a_off = (row0 as isize * rsa) as usize;
        gemm_into(rows, k, n, &a[a_off..], rsa, csa, b, rsb, csb, T::ZERO, chunk);
    });
}

/// Batched matrix product: `a [..., m, k] x b [..., k, p] -> [..., m, p]`,
/// with NumPy-style broadcasting of the leading batch axes. Gradients follow
/// `dA = dC * B^T` and `dB = A^T * dC`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out_data, out_shape) = matmul_forward(a, b)?;
    Ok(Tensor::from_op(
        out_data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(|args| {
            let a = &args.parents[0];
            let b = &args.parents[1];
            let (da, db) = matmul_backward(a, b, args.out_grad, args.out_shape);
            vec![da, db]
        }),
    ))
}

struct BatchPlan {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    p: usize,
    /// Offset of each operand's matrix slice for every output batch index.
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_plan<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<BatchPlan> {
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs at least 2-d operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (k2, p) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let a_batch = &a.shape()[..a.ndim() - 2];
    let b_batch = &b.shape()[..b.ndim() - 2];
    let batch = broadcast_shapes(a_batch, b_batch).map_err(|_| {
        Error::Shape(format!(
            "matmul batch dimensions do not broadcast: {:?} x {:?}",
            a.shape(),
            b.shape()
        ))
    })?;
    let total: usize = batch.iter().product();
    let sa = broadcast_strides(a_batch, &batch);
    let sb = broadcast_strides(b_batch, &batch);
    let mut a_offsets = Vec::with_capacity(total);
    let mut b_offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; batch.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total.max(1) {
        a_offsets.push(ia * (m * k));
        b_offsets.push(ib * (k * p));
        for axis in (0..batch.len()).rev() {
            index[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if index[axis] < batch[axis] {
                break;
            }
            ia -= sa[axis] * batch[axis];
            ib -= sb[axis] * batch[axis];
            index[axis] = 0;
        }
    }
    Ok(BatchPlan {
        batch,
        m,
        k,
        p,
        a_offsets,
        b_offsets,
    })
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Vec<T>, Vec<usize>)> {
    let plan = batch_plan(a, b)?;
    let BatchPlan { batch, m, k, p, a_offsets, b_offsets } = plan;
    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(p);
    let slices = a_offsets.len();
    let mut out = vec![T::ZERO; slices * m * p];
    let (ad, bd) = (a.data(), b.data());
    if slices == 1 {
        gemm_par(m, k, p, ad, bd, &mut out);
    } else {
        chunks_mut_indexed(&mut out, m * p, |s, c| {
            gemm_into(
                m,
                k,
                p,
                &ad[a_offsets[s]..],
                k as isize,
                1,
                &bd[b_offsets[s]..],
                p as isize,
                1,
                T::ZERO,
                c,
            );
        });
    }
    Ok((out, out_shape))
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_grad: &[T],
    out_shape: &[usize],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plan = batch_plan(a, b).expect("shapes already validated in forward");
    let BatchPlan { m, k, p, a_offsets, b_offsets, .. } = plan;
    let slices = a_offsets.len();
    debug_assert_eq!(out_shape.iter().product::<usize>(), slices * m * p);
    let (ad, bd) = (a.data(), b.data());

    let da = a.requires_grad().then(|| {
        let mut da = vec![T::ZERO; a.len()];
        let a_broadcast = a_offsets.windows(2).any(|w| w[1] <= w[0]) && slices > 1;
        if !a_broadcast {
            // Each slice owns a distinct region: parallel, overwrite.
            chunks_mut_indexed(&mut da, m * k, |s, chunk| {
                gemm_into(
                    m,
                    p,
                    k,
                    &out_grad[s * m * p..],
                    p as isize,
                    1,
                    &bd[b_offsets[s]..],
                    // B^T view
                    1,
                    p as isize,
                    T::ZERO,
                    chunk,
                );
            });
        } else {
            // Broadcast input: accumulate slice contributions in batch order.
            for s in 0..slices {
                gemm_into(
                    m,
                    p,
                    k,
                    &out_grad[s * m * p..],
                    p as isize,
                    1,
                    &bd[b_offsets[s]..],
                    1,
                    p as isize,
                    T::ONE,
                    &mut da[a_offsets[s]..],
                );
            }
        }
        da
    });

    let db = b.requires_grad().then(|| {
        let mut db = vec![T::ZERO; b.len()];
        let b_broadcast = b_offsets.windows(2).any(|w| w[1] <= w[0]) && slices > 1;
        if !b_broadcast {
            chunks_mut_indexed(&mut db, k * p, |s, chunk| {
                gemm_into(
                    k,
                    m,
                    p,
                    &ad[a_offsets[s]..],
                    // A^T view
                    1,
                    k as isize,
                    &out_grad[s * m * p..],
                    p as isize,
                    1,
                    T::ZERO,
                    chunk,
                );
            });
        } else {
            for s in 0..slices {
                gemm_into(
                    k,
                    m,
                    p,
                    &ad[a_offsets[s]..],
                    1,
                    k as isize,
                    &out_grad[s * m * p..],
                    p as isize,
                    1,
                    T::ONE,
                    &mut db[b_offsets[s]..],
                );
            }
        }
        db
    });

    (da, db)
}

/// Fused affine map `y = x W^T + bias` where `x` is `[..., in]` and the
/// weight is `[out, in]`. This is the workhorse behind every linear layer.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if weight.ndim() != 2 {
        return Err(Error::Shape(format!(
            "linear weight must be 2-d [out, in], got {:?}",
            weight.shape()
        )));
    }
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if x.ndim() == 0 || x.shape()[x.ndim() - 1] != in_f {
        return Err(Error::Shape(format!(
            "linear input {:?} does not end in the weight's in dimension {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(Error::Shape(format!(
                "linear bias {:?} does not match out dimension {}",
                b.shape(),
                out_f
            )));
        }
    }
    let rows = x.len() / in_f;
    let mut out = vec![T::ZERO; rows * out_f];
    // x [rows, in] * W^T [in, out]
    gemm_par_strided(
        rows,
        in_f,
        out_f,
        x.data(),
        in_f as isize,
        1,
        weight.data(),
        1,
        in_f as isize,
        &mut out,
    );
    if let Some(b) = bias {
        let bd = b.data();
        chunks_mut_indexed(&mut out, out_f, |_, row| {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        });
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = out_f;

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        out,
        out_shape,
        parents,
        Box::new(move |args| {
            let x = &args.parents[0];
            let w = &args.parents[1];
            let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / in_f;
            let g = args.out_grad;

            let dx = x.requires_grad().then(|| {
                let mut dx = vec![T::ZERO; x.len()];
                // dX [rows, in] = dY [rows, out] * W [out, in]
                gemm_par_strided(
                    rows,
                    out_f,
                    in_f,
                    g,
                    out_f as isize,
                    1,
                    w.data(),
                    in_f as isize,
                    1,
                    &mut dx,
                );
                dx
            });

            let dw = w.requires_grad().then(|| {
                let mut dw = vec![T::ZERO; w.len()];
                // dW [out, in] = dY^T [out, rows] * X [rows, in]
                gemm_par_strided(
                    out_f,
                    rows,
                    in_f,
                    g,
                    1,
                    out_f as isize,
                    x.data(),
                    in_f as isize,
                    1,
                    &mut dw,
                );
                dw
            });

            let mut grads = vec![dx, dw];
            if args.parents.len() == 3 {
                let db = args.parents[2].requires_grad().then(|| {
                    let mut db = vec![T::ZERO; out_f];
                    for row in g.chunks_exact(out_f) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    db
                });
                grads.push(db);
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_times_matrix_is_matrix() {
        let eye = t64(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let m = t64(&[2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 7.0, 0.0, 1.0], &[3, 3]);
        let y = matmul(&eye, &m).unwrap();
        assert_eq!(y.data(), m.data());
    }

    #[test]
    fn hand_expanded_product() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t64(&[5.0, 6.0], &[2, 1]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[17.0, 39.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = t64(&[0.0; 6], &[2, 3]);
        let b = t64(&[0.0; 8], &[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let a = t64(&(0..12).map(|v| v as f64).collect::<Vec<_>>(), &[2, 2, 3]);
        let b = t64(&(0..12).map(|v| (v as f64) * 0.5).collect::<Vec<_>>(), &[2, 3, 2]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        for s in 0..2 {
            let asl = &a.data()[s * 6..(s + 1) * 6];
            let bsl = &b.data()[s * 6..(s + 1) * 6];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for kk in 0..3 {
                        acc += asl[i * 3 + kk] * bsl[kk * 2 + j];
                    }
                    assert_eq!(y.data()[s * 4 + i * 2 + j], acc);
                }
            }
        }
    }

    #[test]
    fn broadcast_batch_accumulates_gradient() {
        // a [2,2] broadcast against b [3,2,2]
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::param(vec![1.0; 12], &[3, 2, 2]).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        sum_all(&y).backward().unwrap();
        // each of the 3 slices contributes dA = dC * B^T = ones*ones^T = 2s
        assert_eq!(a.grad().unwrap(), vec![6.0; 4]);
        // dB per slice = A^T * ones
        assert_eq!(
            b.grad().unwrap(),
            vec![4.0, 4.0, 6.0, 6.0, 4.0, 4.0, 6.0, 6.0, 4.0, 4.0, 6.0, 6.0]
        );
    }

    #[test]
    fn linear_identity_passthrough() {
        let w = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = t64(&[3.0, -4.0, 5.5, 0.0], &[2, 2]);
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_dot_plus_bias() {
        let w = t64(&[1.0, 1.0], &[1, 2]);
        let b = t64(&[0.5], &[1]);
        let x = t64(&[2.0, 3.0], &[1, 2]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[5.5]);
    }

    #[test]
    fn linear_backward_matches_composed_ops() {
        let x = Tensor::<f64>::param(vec![0.3, -0.7, 1.2, 0.4, 0.9, -1.1], &[2, 3]).unwrap();
        let w = Tensor::<f64>::param(vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8], &[2, 4])
            .unwrap();
        // mismatched inner dims must error, naming shapes
        assert!(linear(&x, &w, None).is_err());

        let w = Tensor::<f64>::param(vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6], &[2, 3]).unwrap();
        let b = Tensor::<f64>::param(vec![0.05, -0.02], &[2]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        sum_all(&y).backward().unwrap();
        // dW = dY^T X with dY all ones: each row of dW is the column sums of X
        let col_sums = [0.7, 0.2, 0.1];
        let dw = w.grad().unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((dw[r * 3 + c] - col_sums[c]).abs() < 1e-12);
            }
        }
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
        // dX = dY W: each row is the column sums of W
        let dx = x.grad().unwrap();
        for r in 0..2 {
            assert!((dx[r * 3] - 0.6).abs() < 1e-12);
            assert!((dx[r * 3 + 1] - (-0.4)).abs() < 1e-12);
            assert!((dx[r * 3 + 2] - (-0.3)).abs() < 1e-12);
        }
    }
}
