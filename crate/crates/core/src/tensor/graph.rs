use std::collections::HashMap;

use super::ops::{backward_op, Op};
use super::{ParamId, ParamStore, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Operation tape. Node indices increase with creation, so the tape is
/// already topologically sorted.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant or differentiable input.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the
    /// same node so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param(id),
            store.is_trainable(id),
        );
        self.params.insert(id, v);
        v
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

    /// Reverse sweep from a scalar `loss`. Each node is visited at most once,
    /// in reverse creation order; nodes that do not require gradients are
    /// never expanded.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    loss_node.value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };
        if !loss_node.requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => backward_op(self, op, &node.value, &g, &mut |var: Var, contrib: GradContrib<T>| {
                    if !self.nodes[var.0].requires_grad {
                        return;
                    }
                    let slot = &mut grads[var.0];
                    match (slot.as_mut(), contrib) {
                        (None, GradContrib::Owned(v)) => *slot = Some(v),
                        (None, GradContrib::Add(v)) => *slot = Some(v.to_vec()),
                        (Some(acc), GradContrib::Owned(v)) => {
                            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += *b)
                        }
                        (Some(acc), GradContrib::Add(v)) => {
                            acc.iter_mut().zip(v).for_each(|(a, b)| *a += *b)
                        }
                    }
                }),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

pub(crate) enum GradContrib<'a, T> {
    Owned(Vec<T>),
    Add(&'a [T]),
}

/// Gradients of leaves and parameters produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf input; `None` when the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}
