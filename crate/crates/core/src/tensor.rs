//! Dense n-dimensional tensor with reverse-mode gradient tracking.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to an immutable row-major
//! buffer. Out-of-place operations allocate fresh storage, so no tensor ever
//! aliases another tensor's buffer. When gradients are enabled, each op
//! output records its parents and a backward rule; [`crate::tape`] replays
//! those records in reverse topological order.
//!
//! The graph is confined to one thread (`Rc` + `RefCell`), matching the
//! single-training-thread design. Kernels still parallelize internally over
//! plain slices.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled (inference / numeric probes).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Arguments handed to a backward rule: the op's own output value and
/// incoming gradient, plus its input tensors.
pub(crate) struct BackwardArgs<'a, T: Scalar> {
    pub out_data: &'a [T],
    pub out_shape: &'a [usize],
    pub out_grad: &'a [T],
    pub parents: &'a [Tensor<T>],
}

/// Computes one gradient buffer per parent (None for parents that do not
/// require grad or receive no gradient from this op).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

pub(crate) struct OpRecord<T: Scalar> {
    pub parents: Vec<Tensor<T>>,
    pub backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<OpRecord<T>>,
}

pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<OpRecord<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Leaf tensor that does not participate in gradients.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "buffer of {} scalars cannot take shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor with gradient tracking (a trainable parameter).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::make(
            t.inner.data.clone(),
            t.inner.shape.clone(),
            true,
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::make(vec![T::ZERO; len], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self::make(vec![value; len], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![value], Vec::new(), false, None)
    }

    pub fn from_f64s(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    /// Output of a differentiable operation. Parents and the backward rule
    /// are only recorded when some input needs gradients and recording is on.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let op = track.then_some(OpRecord { parents, backward });
        Self::make(data, shape, track, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() requires a one-element tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Leaf copy of this tensor's values, detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::make(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    pub fn to_f64s(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.to_f64()).collect()
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        debug_assert_eq!(contribution.len(), self.len());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow_mut().take()
    }

    pub(crate) fn op(&self) -> Option<&OpRecord<T>> {
        self.inner.op.as_ref()
    }

    /// Backpropagate from this scalar through everything that produced it.
    pub fn backward(&self) -> Result<()> {
        crate::tape::backward(self)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<String> = self.data().iter().take(8).map(|v| format!("{v}")).collect();
        let ellipsis = if self.len() > 8 { ", .." } else { "" };
        write!(
            f,
            "Tensor(shape={:?}, grad={}, [{}{}])",
            self.shape(),
            self.requires_grad(),
            preview.join(", "),
            ellipsis
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_buffer() {
        assert!(Tensor::<f32>::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::<f32>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn scalar_tensor_has_empty_shape() {
        let s = Tensor::<f64>::scalar(3.5);
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn grad_accumulates_additively() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        p.accumulate_grad(&[1.0, 10.0]);
        p.accumulate_grad(&[2.0, 20.0]);
        assert_eq!(p.grad().unwrap(), vec![3.0, 30.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| crate::ops::relu(&p));
        assert!(!y.requires_grad());
        let y = crate::ops::relu(&p);
        assert!(y.requires_grad());
    }
}
