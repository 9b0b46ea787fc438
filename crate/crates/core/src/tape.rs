//! Reverse-mode backward pass.
//!
//! Tensor ids increase monotonically at creation and every op output is
//! created after its inputs, so sorting the reachable nodes by descending id
//! yields a reverse topological order. Each node is visited exactly once;
//! gradients flowing into shared inputs are summed.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BackwardArgs, Tensor};

/// The recorded operations reachable from one root, in reverse topological
/// order (consumers before producers).
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Collect every gradient-tracked node reachable from `root`.
    pub fn trace(root: &Tensor<T>) -> Self {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack: Vec<Tensor<T>> = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                for p in &op.parents {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Seed `root` with a unit gradient and propagate to every leaf.
    pub fn backward(&self, root: &Tensor<T>) -> Result<()> {
        if root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        root.accumulate_grad(&[T::ONE]);
        for node in &self.nodes {
            let Some(op) = node.op() else { continue };
            // Interior grads are taken (and thereby freed) once all
            // consumers have contributed, which the visit order guarantees.
            let Some(grad) = node.take_grad() else { continue };
            let args = BackwardArgs {
                out_data: node.data(),
                out_shape: node.shape(),
                out_grad: &grad,
                parents: &op.parents,
            };
            let contributions = (op.backward)(&args);
            debug_assert_eq!(contributions.len(), op.parents.len());
            for (parent, contribution) in op.parents.iter().zip(contributions) {
                if let Some(c) = contribution {
                    if parent.requires_grad() {
                        parent.accumulate_grad(&c);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    Tape::trace(loss).backward(loss)
}

#[cfg(test)]
mod tests {
    use crate::ops;
    use crate::tensor::Tensor;

    #[test]
    fn sum_backward_is_all_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_backward_is_two_x() {
        let x = Tensor::<f64>::param(vec![1.5, -2.0, 0.0, 4.0], &[4]).unwrap();
        let loss = ops::sum_all(&ops::mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -4.0, 0.0, 8.0]);
    }

    #[test]
    fn fan_out_doubles_the_gradient() {
        let x = Tensor::<f64>::param(vec![2.0, 5.0], &[2]).unwrap();
        let y = ops::scale(&x, 1.0);
        let loss = ops::sum_all(&ops::add(&y, &y).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::relu(&x);
        assert!(y.backward().is_err());
    }
}
