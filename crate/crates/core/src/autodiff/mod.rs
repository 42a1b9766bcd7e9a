//! Reverse-mode differentiation over a linear tape of primitive applications.
//!
//! Every primitive pushes one node holding its forward value and a pullback
//! closure. [`Tape::backward`] walks the nodes in reverse order and accumulates
//! input gradients additively, so a value used twice receives the sum of both
//! contributions. Accumulation always follows tape order, which makes
//! gradients bit-reproducible for a given tape.

mod ops;

pub use ops::{permute_index, Primitive, Reduction, GATHER_ZERO, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct PullbackArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

pub(crate) type Pullback<T> = Box<dyn Fn(&PullbackArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    pullback: Option<Pullback<T>>,
    requires_grad: bool,
}

/// Scales the pullback output of every node whose primitive name matches.
/// Used to verify that gradient checks catch a broken derivative.
#[derive(Clone, Debug)]
pub struct FaultInjection {
    pub op: String,
    pub factor: f64,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<FaultInjection>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<FaultInjection>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            pullback: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        pullback: Pullback<T>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            pullback: requires_grad.then_some(pullback),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(loss)/d(node) back to every reachable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(pullback) = &node.pullback else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let mut input_grads = pullback(&PullbackArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            if let Some(fault) = &self.fault {
                if fault.op == node.op {
                    let f = T::from_f64(fault.factor);
                    for g in input_grads.iter_mut().flatten() {
                        *g = g.scaled(f);
                    }
                }
            }
            for ((&src, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[src].value.shape(), "{}", node.op);
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
