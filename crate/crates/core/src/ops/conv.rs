//! 2-D convolution (im2col + gemm) and max pooling.

use crate::error::{Error, Result};
use crate::parallel::{chunks2_mut_indexed, chunks_mut_indexed, map_indexed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples per weight-gradient accumulation group. Group partials are summed
/// in a fixed order so the result is independent of the worker count.
const DW_GROUP: usize = 16;

/// Output extent of a conv/pool window sweep, or None when the kernel does
/// not fit the padded input.
pub fn conv_output_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if k == 0 || stride == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct Geometry {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn window_geometry<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
    op_name: &str,
) -> Result<Geometry> {
    if x.ndim() != 4 {
        return Err(Error::Shape(format!(
            "{op_name} expects [batch, channels, h, w], got {:?}",
            x.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Shape(format!("{op_name} stride must be >= 1")));
    }
    let (batch, channels, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let h_out = conv_output_extent(h, k, stride, padding);
    let w_out = conv_output_extent(w, k, stride, padding);
    match (h_out, w_out) {
        (Some(h_out), Some(w_out)) => Ok(Geometry {
            batch,
            channels,
            h,
            w,
            k,
            h_out,
            w_out,
        }),
        _ => Err(Error::Shape(format!(
            "{op_name} kernel {k}x{k} (stride {stride}, padding {padding}) does not fit input {h}x{w}"
        ))),
    }
}

/// Unfold one sample into a [ci*k*k, h_out*w_out] patch matrix (zero padded).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    col: &mut [T],
) {
    let cols = h_out * w_out;
    debug_assert_eq!(col.len(), channels * k * k * cols);
    for v in col.iter_mut() {
        *v = T::ZERO;
    }
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * w_out;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst_row + ox] = plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input plane (scatter-add).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [T],
) {
    let cols = h_out * w_out;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    let src_row = row + oy * w_out;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst_row + ix as usize] += col[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation convolution (no kernel flip) with zero padding,
/// differentiable w.r.t. both the input and the weights.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if weight.ndim() != 4 || weight.shape()[2] != weight.shape()[3] {
        return Err(Error::Shape(format!(
            "conv2d weight must be [c_out, c_in, k, k], got {:?}",
            weight.shape()
        )));
    }
    let k = weight.shape()[2];
    let geo = window_geometry(x, k, stride, padding, "conv2d")?;
    let (c_out, c_in) = (weight.shape()[0], weight.shape()[1]);
    if c_in != geo.channels {
        return Err(Error::Shape(format!(
            "conv2d input channels {} do not match weight {:?}",
            geo.channels,
            weight.shape()
        )));
    }
    let cols = geo.h_out * geo.w_out;
    let patch = c_in * k * k;
    let mut out = vec![T::ZERO; geo.batch * c_out * cols];
    let xd = x.data();
    let wd = weight.data();
    let plane_in = geo.channels * geo.h * geo.w;
    chunks_mut_indexed(&mut out, c_out * cols, |b, out_b| {
        let mut col = vec![T::ZERO; patch * cols];
        im2col(
            &xd[b * plane_in..(b + 1) * plane_in],
            geo.channels,
            geo.h,
            geo.w,
            k,
            stride,
            padding,
            geo.h_out,
            geo.w_out,
            &mut col,
        );
        unsafe {
            T::gemm(
                c_out,
                patch,
                cols,
                T::ONE,
                wd.as_ptr(),
                patch as isize,
                1,
                col.as_ptr(),
                cols as isize,
                1,
                T::ZERO,
                out_b.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
    });

    let out_shape = vec![geo.batch, c_out, geo.h_out, geo.w_out];
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![x.clone(), weight.clone()],
        Box::new(move |args| {
            let x = &args.parents[0];
            let weight = &args.parents[1];
            let xd = x.data();
            let wd = weight.data();
            let g = args.out_grad;
            let batch = x.shape()[0];
            let (channels, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            let plane_in = channels * h * w;
            let (h_out, w_out) = (args.out_shape[2], args.out_shape[3]);
            let cols = h_out * w_out;
            let patch = channels * k * k;

            let dx = x.requires_grad().then(|| {
                let mut dx = vec![T::ZERO; xd.len()];
                chunks_mut_indexed(&mut dx, plane_in, |b, dx_b| {
                    let mut dcol = vec![T::ZERO; patch * cols];
                    // dcol = W^T [patch, c_out] * dY_b [c_out, cols]
                    unsafe {
                        T::gemm(
                            patch,
                            c_out,
                            cols,
                            T::ONE,
                            wd.as_ptr(),
                            1,
                            patch as isize,
                            g[b * c_out * cols..].as_ptr(),
                            cols as isize,
                            1,
                            T::ZERO,
                            dcol.as_mut_ptr(),
                            cols as isize,
                            1,
                        );
                    }
                    col2im(
                        &dcol, channels, h, w, k, stride, padding, h_out, w_out, dx_b,
                    );
                });
                dx
            });

            let dw = weight.requires_grad().then(|| {
                let groups = batch.div_ceil(DW_GROUP);
                let partials = map_indexed(groups, |gi| {
                    let lo = gi * DW_GROUP;
                    let hi = (lo + DW_GROUP).min(batch);
                    let mut acc = vec![T::ZERO; c_out * patch];
                    let mut col = vec![T::ZERO; patch * cols];
                    for b in lo..hi {
                        im2col(
                            &xd[b * plane_in..(b + 1) * plane_in],
                            channels,
                            h,
                            w,
                            k,
                            stride,
                            padding,
                            h_out,
                            w_out,
                            &mut col,
                        );
                        // acc += dY_b [c_out, cols] * col^T [cols, patch]
                        unsafe {
                            T::gemm(
                                c_out,
                                cols,
                                patch,
                                T::ONE,
                                g[b * c_out * cols..].as_ptr(),
                                cols as isize,
                                1,
                                col.as_ptr(),
                                1,
                                cols as isize,
                                T::ONE,
                                acc.as_mut_ptr(),
                                patch as isize,
                                1,
                            );
                        }
                    }
                    acc
                });
                let mut dw = vec![T::ZERO; c_out * patch];
                for partial in partials {
                    for (d, p) in dw.iter_mut().zip(partial) {
                        *d += p;
                    }
                }
                dw
            });

            vec![dx, dw]
        }),
    ))
}

/// Per-window maximum with implicit -inf padding (padding cells are never
/// selected). The gradient routes to the first maximal element of each
/// window in row-major scan order; windows that cover only padding emit 0.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = window_geometry(x, k, stride, padding, "maxpool2d")?;
    let cols = geo.h_out * geo.w_out;
    let planes = geo.batch * geo.channels;
    let plane_in = geo.h * geo.w;
    let mut out = vec![T::ZERO; planes * cols];
    let mut argmax = vec![u32::MAX; planes * cols];
    let xd = x.data();
    chunks2_mut_indexed(&mut out, &mut argmax, cols, cols, |p, out_p, idx_p| {
        let plane = &xd[p * plane_in..(p + 1) * plane_in];
        for oy in 0..geo.h_out {
            for ox in 0..geo.w_out {
                let mut best: Option<(T, u32)> = None;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= geo.w as isize {
                            continue;
                        }
                        let off = iy as usize * geo.w + ix as usize;
                        let v = plane[off];
                        // strict > keeps the first (lowest index) maximum
                        match best {
                            Some((bv, _)) if !(v > bv) => {}
                            _ => best = Some((v, off as u32)),
                        }
                    }
                }
                let o = oy * geo.w_out + ox;
                if let Some((v, idx)) = best {
                    out_p[o] = v;
                    idx_p[o] = idx;
                }
            }
        }
    });

    let out_shape = vec![geo.batch, geo.channels, geo.h_out, geo.w_out];
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![x.clone()],
        Box::new(move |args| {
            let x = &args.parents[0];
            let plane_in = x.shape()[2] * x.shape()[3];
            let g = args.out_grad;
            let mut dx = vec![T::ZERO; x.len()];
            chunks_mut_indexed(&mut dx, plane_in, |p, dx_p| {
                let base = p * cols;
                for o in 0..cols {
                    let idx = argmax[base + o];
                    if idx != u32::MAX {
                        dx_p[idx as usize] += g[base + o];
                    }
                }
            });
            vec![Some(dx)]
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
    fn one_by_one_kernel_is_identity() {
        let x = t64(&(0..16).map(|v| v as f64).collect::<Vec<_>>(), &[1, 1, 4, 4]);
        let w = t64(&[1.0], &[1, 1, 1, 1]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_counts_receptive_field() {
        let x = t64(&[1.0; 16], &[1, 1, 4, 4]);
        let w = t64(&[1.0; 9], &[1, 1, 3, 3]);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let expect = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let x = t64(&[0.0; 16], &[1, 1, 4, 4]);
        let w = t64(&[0.0; 49], &[1, 1, 7, 7]);
        assert!(conv2d(&x, &w, 1, 1).is_err());
    }

    #[test]
    fn conv_gradients_flow_to_input_and_weight() {
        let x = Tensor::<f64>::param((0..18).map(|v| v as f64 * 0.1).collect(), &[1, 2, 3, 3])
            .unwrap();
        let w = Tensor::<f64>::param(vec![0.5; 2 * 2 * 4], &[2, 2, 2, 2]).unwrap();
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        sum_all(&y).backward().unwrap();
        // dW entry = sum over output positions of the input under the tap;
        // with dY all ones, dw[0,0,0,0] = x[0,0,{0,1},{0,1}] summed
        let dw = w.grad().unwrap();
        let expect00 = 0.0 + 0.1 + 0.3 + 0.4;
        assert!((dw[0] - expect00).abs() < 1e-12);
        // input under every tap of both out-channels: corner sees k*k copies
        let dx = x.grad().unwrap();
        assert!((dx[0] - 2.0 * 0.5).abs() < 1e-12); // x[0,0,0,0] used once per out channel
        assert!((dx[4] - 2.0 * 4.0 * 0.5).abs() < 1e-12); // center used 4 times
    }

    #[test]
    fn maxpool_single_window() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn overlapping_pool_size_formula() {
        let x = t64(&vec![0.0; 32 * 32], &[1, 1, 32, 32]);
        let y = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn constant_input_routes_unit_gradient_per_window() {
        let x = Tensor::<f64>::param(vec![7.0; 16], &[1, 1, 4, 4]).unwrap();
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        sum_all(&y).backward().unwrap();
        let dx = x.grad().unwrap();
        // ties break to the first element of each window
        let total: f64 = dx.iter().sum();
        assert_eq!(total, 4.0);
        assert_eq!(dx[0], 1.0);
        assert_eq!(dx[2], 1.0);
        assert_eq!(dx[8], 1.0);
        assert_eq!(dx[10], 1.0);
    }

    #[test]
    fn extent_formula_over_full_parameter_grid() {
        // closed-form extents match an explicit window enumeration
        for k in 1..=7usize {
            for stride in 1..=4usize {
                for padding in 0..=3usize {
                    for extent in 1..=9usize {
                        let expect = conv_output_extent(extent, k, stride, padding);
                        let padded = extent + 2 * padding;
                        if k > padded {
                            assert!(expect.is_none());
                            continue;
                        }
                        let mut count = 0usize;
                        let mut pos = 0usize;
                        while pos + k <= padded {
                            count += 1;
                            pos += stride;
                        }
                        assert_eq!(expect, Some(count), "e={extent} k={k} s={stride} p={padding}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_pool_shapes_agree_with_formula() {
        for k in 1..=4usize {
            for stride in 1..=3usize {
                for padding in 0..=2usize {
                    let x = t64(&vec![1.0; 100], &[1, 1, 10, 10]);
                    let Some(e) = conv_output_extent(10, k, stride, padding) else {
                        continue;
                    };
                    let w = t64(&vec![1.0; k * k], &[1, 1, k, k]);
                    let y = conv2d(&x, &w, stride, padding).unwrap();
                    assert_eq!(y.shape(), &[1, 1, e, e]);
                    let y = maxpool2d(&x, k, stride, padding).unwrap();
                    assert_eq!(y.shape(), &[1, 1, e, e]);
                }
            }
        }
    }
}
