use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Result, TsgError};

/// Backward closure: receives the output gradient and, per parent, whether
/// that parent needs a gradient. Returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

/// A single-use tape. Build one per forward pass, call [`Graph::backward`]
/// once (or several times, gradients accumulate), then drop it.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of free (non-parameter) leaves produced by a backward pass.
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: HashMap<usize, Tensor>,
}

impl LeafGrads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// A free leaf. With `requires_grad`, its gradient is returned by
    /// [`Graph::backward`] in [`LeafGrads`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
            param: None,
        })
    }

    /// A leaf bound to a stored parameter. Frozen parameters become constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_node(Node {
            value: store.shared_value(id),
            requires_grad: store.is_trainable(id),
            parents: Vec::new(),
            backward: None,
            param: Some(id),
        })
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// requires a gradient.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parent_ids.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parent_ids,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            param: None,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a one-element `loss`. Parameter gradients are added
    /// into `store`; free-leaf gradients are returned.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<LeafGrads> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TsgError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut leaf_grads = LeafGrads::default();
        if !root.requires_grad {
            return Ok(leaf_grads);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                store.grad_mut(pid).add_assign(&grad);
                continue;
            }
            let Some(backward) = &node.backward else {
                leaf_grads.grads.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(leaf_grads)
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }
}
