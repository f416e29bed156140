//! Dynamically recorded reverse-mode tape.
//!
//! Every op appends a node holding its forward value and a closure that maps
//! the output gradient to input gradients. `backward` walks the nodes in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference earlier nodes.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a node's backward closure.
pub struct BackCtx<'a> {
    pub grad: &'a [f64],
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

impl BackCtx<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

type BackwardFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op. The closure is dropped when no parent needs a gradient.
    pub fn push<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackCtx) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss element count",
                1,
                loss_value.numel(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[parent.0].value.numel());
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaf = self.nodes.iter().map(|n| n.parents.is_empty()).collect();
        Ok(Gradients {
            grads,
            shapes,
            leaf,
        })
    }
}

/// Gradients of a scalar with respect to leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaf: Vec<bool>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves that require grad but were not reached get zeros.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !self.leaf[v.0] {
            return None;
        }
        let shape = &self.shapes[v.0];
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        })
    }
}
