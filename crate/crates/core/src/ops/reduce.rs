//! Full reductions to a scalar.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Chunked sum with a fixed combine order: per-chunk sequential sums are
/// folded left in chunk order, independent of the worker count.
const SUM_CHUNK: usize = 16 * 1024;

pub(crate) fn sum_slice<T: Scalar>(data: &[T]) -> T {
    if data.len() <= SUM_CHUNK {
        let mut acc = T::ZERO;
        for &v in data {
            acc += v;
        }
        return acc;
    }
    let n_chunks = data.len().div_ceil(SUM_CHUNK);
    let partials = crate::parallel::map_indexed(n_chunks, |c| {
        let lo = c * SUM_CHUNK;
        let hi = (lo + SUM_CHUNK).min(data.len());
        let mut acc = T::ZERO;
        for &v in &data[lo..hi] {
            acc += v;
        }
        acc
    });
    let mut acc = T::ZERO;
    for p in partials {
        acc += p;
    }
    acc
}

/// Sum of every element, as a scalar tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total = sum_slice(x.data());
    Tensor::from_op(
        vec![total],
        Vec::new(),
        vec![x.clone()],
        Box::new(|args| {
            let g = args.out_grad[0];
            vec![Some(vec![g; args.parents[0].len()])]
        }),
    )
}

/// Mean of every element, as a scalar tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.len().max(1) as f64;
    crate::ops::scale(&sum_all(x), 1.0 / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_all_divides_by_len() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 6.0], &[4]).unwrap();
        let m = mean_all(&x);
        assert_eq!(m.item(), 3.0);
        m.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }
}
