//! Reverse-mode differentiation over the implicit op graph.
//!
//! Nodes are created in program order, so a node's id is always greater than
//! the ids of its parents. Backward therefore needs no explicit topological
//! sort: it pops the highest pending id, applies the node's gradient
//! function, and pushes contributions onto the parents.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure, Result};
use crate::tensor::{ParamId, Tensor};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Per-op gradient propagation: given the gradient of the loss with respect
/// to the op's output, produce contributions for each tracked parent.
pub(crate) trait GradFn: Send + Sync {
    fn backward(&self, grad_out: &[f64]) -> Vec<(Arc<Node>, Vec<f64>)>;
}

pub(crate) enum NodeKind {
    Leaf { param: ParamId },
    Op(Box<dyn GradFn>),
}

pub(crate) struct Node {
    id: u64,
    kind: NodeKind,
}

impl Node {
    pub(crate) fn leaf(param: ParamId, _len: usize) -> Arc<Node> {
        Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            kind: NodeKind::Leaf { param },
        })
    }

    pub(crate) fn op(grad_fn: Box<dyn GradFn>) -> Arc<Node> {
        Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            kind: NodeKind::Op(grad_fn),
        })
    }
}

/// Gradients of a scalar loss with respect to every parameter that
/// participated in its graph.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|v| v.as_slice())
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.by_param.contains_key(&id)
    }

    pub fn param_count(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Computes gradients of a scalar `loss` with respect to all parameters in
/// its graph.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    ensure!(
        loss.shape().numel() == 1,
        "backward requires a scalar loss, got shape {}",
        loss.shape()
    );
    let root = loss
        .node()
        .ok_or_else(|| crate::Error::contract("backward on a tensor outside the gradient tape"))?;

    let mut pending: BTreeMap<u64, (Arc<Node>, Vec<f64>)> = BTreeMap::new();
    pending.insert(root.id, (Arc::clone(root), vec![1.0]));
    let mut grads = Gradients::default();

    while let Some((&id, _)) = pending.iter().next_back() {
        let (node, grad) = pending.remove(&id).expect("id just observed");
        match &node.kind {
            NodeKind::Leaf { param } => match grads.by_param.get_mut(param) {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grad) {
                        *a += g;
                    }
                }
                None => {
                    grads.by_param.insert(*param, grad);
                }
            },
            NodeKind::Op(f) => {
                for (parent, contribution) in f.backward(&grad) {
                    debug_assert!(parent.id < id, "graph must be topologically ordered");
                    match pending.get_mut(&parent.id) {
                        Some((_, acc)) => {
                            for (a, g) in acc.iter_mut().zip(&contribution) {
                                *a += g;
                            }
                        }
                        None => {
                            pending.insert(parent.id, (parent, contribution));
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}
