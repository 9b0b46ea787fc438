//! Softmax and layer normalization.

use crate::error::{Error, Result};
use crate::parallel::chunks_mut_indexed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerically stable softmax along `axis` (max-subtraction before exp).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let block = len * inner;
    let mut out = x.data().to_vec();
    chunks_mut_indexed(&mut out, block, |_, chunk| {
        for j in 0..inner {
            let mut max = chunk[j];
            for i in 1..len {
                let v = chunk[i * inner + j];
                if v > max {
                    max = v;
                }
            }
            let mut total = T::ZERO;
            for i in 0..len {
                let e = (chunk[i * inner + j] - max).exp();
                chunk[i * inner + j] = e;
                total += e;
            }
            for i in 0..len {
                chunk[i * inner + j] = chunk[i * inner + j] / total;
            }
        }
    });
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |args| {
            // dx = y * (g - sum(g * y)) per slice
            let y = args.out_data;
            let g = args.out_grad;
            let mut dx = vec![T::ZERO; y.len()];
            chunks_mut_indexed(&mut dx, block, |bi, chunk| {
                let base = bi * block;
                for j in 0..inner {
                    let mut dot = T::ZERO;
                    for i in 0..len {
                        let o = base + i * inner + j;
                        dot += g[o] * y[o];
                    }
                    for i in 0..len {
                        let o = base + i * inner + j;
                        chunk[i * inner + j] = y[o] * (g[o] - dot);
                    }
                }
            });
            vec![Some(dx)]
        }),
    ))
}

/// Per-token normalization over the last axis followed by the affine map
/// `gamma * x_hat + beta`. Variance is the biased (1/d) estimate.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| {
        Error::Shape("layernorm needs at least one axis".into())
    })?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Shape(format!(
            "layernorm affine parameters {:?}/{:?} do not match feature dim {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let eps = T::from_f64(eps);
    let mut out = vec![T::ZERO; x.len()];
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    chunks_mut_indexed(&mut out, d, |t, token| {
        let src = &xd[t * d..(t + 1) * d];
        let (mean, rstd) = token_stats(src, eps);
        for i in 0..d {
            token[i] = gd[i] * ((src[i] - mean) * rstd) + bd[i];
        }
    });
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args| {
            let x = &args.parents[0];
            let gamma = &args.parents[1];
            let beta = &args.parents[2];
            let xd = x.data();
            let gd = gamma.data();
            let g = args.out_grad;
            let tokens = xd.len() / d;
            let inv_d = T::from_f64(1.0 / d as f64);

            let dx = x.requires_grad().then(|| {
                let mut dx = vec![T::ZERO; xd.len()];
                chunks_mut_indexed(&mut dx, d, |t, token| {
                    let src = &xd[t * d..(t + 1) * d];
                    let gt = &g[t * d..(t + 1) * d];
                    let (mean, rstd) = token_stats(src, eps);
                    // dy through the affine, then the standard LN pullback:
                    // dx = rstd * (dxh - mean(dxh) - xh * mean(dxh * xh))
                    let mut sum_dxh = T::ZERO;
                    let mut sum_dxh_xh = T::ZERO;
                    for i in 0..d {
                        let xh = (src[i] - mean) * rstd;
                        let dxh = gt[i] * gd[i];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let mean_dxh = sum_dxh * inv_d;
                    let mean_dxh_xh = sum_dxh_xh * inv_d;
                    for i in 0..d {
                        let xh = (src[i] - mean) * rstd;
                        let dxh = gt[i] * gd[i];
                        token[i] = (dxh - mean_dxh - xh * mean_dxh_xh) * rstd;
                    }
                });
                dx
            });

            let dgamma = gamma.requires_grad().then(|| {
                let mut dg = vec![T::ZERO; d];
                for t in 0..tokens {
                    let src = &xd[t * d..(t + 1) * d];
                    let gt = &g[t * d..(t + 1) * d];
                    let (mean, rstd) = token_stats(src, eps);
                    for i in 0..d {
                        dg[i] += gt[i] * ((src[i] - mean) * rstd);
                    }
                }
                dg
            });

            let dbeta = beta.requires_grad().then(|| {
                let mut db = vec![T::ZERO; d];
                for t in 0..tokens {
                    let gt = &g[t * d..(t + 1) * d];
                    for i in 0..d {
                        db[i] += gt[i];
                    }
                }
                db
            });

            vec![dx, dgamma, dbeta]
        }),
    ))
}

fn token_stats<T: Scalar>(token: &[T], eps: T) -> (T, T) {
    let d = token.len();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut mean = T::ZERO;
    for &v in token {
        mean += v;
    }
    mean *= inv_d;
    let mut var = T::ZERO;
    for &v in token {
        let c = v - mean;
        var += c * c;
    }
    var *= inv_d;
    let rstd = T::ONE / (var + eps).sqrt();
    (mean, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let y = softmax(&t64(&[0.0, 0.0], &[2]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let y = softmax(&t64(&[1.0, 2.0, 3.0], &[3]), 0).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = t64(&[0.3, -1.2, 4.0, 2.5, 0.0, -0.7], &[2, 3]);
        let y = softmax(&x, 1).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = crate::ops::add(&x, &Tensor::scalar(117.25)).unwrap();
        let ys = softmax(&shifted, 1).unwrap();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_middle_axis() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]);
        let y = softmax(&x, 1).unwrap();
        // slices along axis 1: pairs (x[b,0,j], x[b,1,j])
        for b in 0..2 {
            for j in 0..2 {
                let a = y.data()[b * 4 + j];
                let c = y.data()[b * 4 + 2 + j];
                assert!((a + c - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_constant_token_is_all_zeros() {
        let x = t64(&[5.0; 8], &[2, 4]);
        let gamma = t64(&[1.0; 4], &[4]);
        let beta = t64(&[0.0; 4], &[4]);
        let y = layernorm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_output_statistics() {
        let d = 64;
        let mut rng = 1234567u64;
        let data: Vec<f64> = (0..4 * d)
            .map(|_| {
                // small xorshift for reproducible pseudo-random inputs
                rng ^= rng << 13;
                rng ^= rng >> 7;
                rng ^= rng << 17;
                ((rng % 10_000) as f64) / 5_000.0 - 1.0
            })
            .collect();
        let x = t64(&data, &[4, d]);
        let gamma = t64(&vec![1.0; d], &[d]);
        let beta = t64(&vec![0.0; d], &[d]);
        let y = layernorm(&x, &gamma, &beta, 1e-10).unwrap();
        for token in y.data().chunks(d) {
            let mean: f64 = token.iter().sum::<f64>() / d as f64;
            let var: f64 = token.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layernorm_affine_gradients() {
        let x = t64(&[1.0, 3.0, -2.0, 0.5, 2.0, -1.0], &[2, 3]);
        let gamma = Tensor::<f64>::param(vec![1.0; 3], &[3]).unwrap();
        let beta = Tensor::<f64>::param(vec![0.0; 3], &[3]).unwrap();
        let y = layernorm(&x, &gamma, &beta, 1e-5).unwrap();
        sum_all(&y).backward().unwrap();
        // dbeta counts tokens
        assert_eq!(beta.grad().unwrap(), vec![2.0; 3]);
        // dgamma sums x_hat over tokens; each token's x_hat sums to ~0
        let dg: f64 = gamma.grad().unwrap().iter().sum();
        assert!(dg.abs() < 1e-9);
    }
}
