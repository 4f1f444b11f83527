//! Wengert tape for reverse-mode differentiation.
//!
//! Primitives record one entry per application: the parent node ids and a
//! backward rule closing over whatever forward values the rule needs.
//! Entries are topologically ordered by construction, so the backward pass
//! is a single reverse sweep that visits each entry exactly once.
//!
//! A tape lives for one training step. Leaves (parameters, checked inputs)
//! are registered with [`Tape::leaf`], which is memoized on buffer identity:
//! binding the same parameter twice yields the same node, so gradients from
//! every use accumulate in one place.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type TapeId = u64;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Per-parent gradient contributions. Slot order matches the parent order
/// given at record time; `needs[i]` is false for detached parents, whose
/// slots may be left as `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Option<NodeId>>,
    rule: Option<BackwardFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// Persistent accumulators: repeated backward calls add into these.
    grads: Vec<Option<Vec<f64>>>,
    /// Buffer identity -> leaf node, for memoized binding.
    leaves: HashMap<usize, NodeId>,
}

pub struct Tape {
    id: TapeId,
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                leaves: HashMap::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register `t` as a differentiable leaf on this tape. No-op for tensors
    /// that do not require grad. Memoized per underlying buffer.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        if !t.requires_grad() {
            return t.clone();
        }
        let key = std::sync::Arc::as_ptr(t.buffer()) as usize;
        let mut inner = self.inner.borrow_mut();
        let id = match inner.leaves.get(&key) {
            Some(&id) => id,
            None => {
                let id = inner.nodes.len();
                inner.nodes.push(Node {
                    parents: Vec::new(),
                    rule: None,
                });
                inner.grads.push(None);
                inner.leaves.insert(key, id);
                id
            }
        };
        let mut bound = t.clone();
        bound.node = Some((self.id, id));
        bound
    }

    /// Record a primitive application. Returns `out` attached to this tape
    /// when at least one parent is attached; otherwise returns it detached
    /// and drops the rule (pure compute, nothing to differentiate).
    pub(crate) fn record(
        &self,
        parents: &[&Tensor],
        mut out: Tensor,
        rule: BackwardFn,
    ) -> Tensor {
        let parent_ids: Vec<Option<NodeId>> = parents
            .iter()
            .map(|p| match p.node {
                Some((tid, nid)) if tid == self.id => Some(nid),
                _ => None,
            })
            .collect();
        if parent_ids.iter().all(|p| p.is_none()) {
            return out;
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents: parent_ids,
            rule: Some(rule),
        });
        inner.grads.push(None);
        out.node = Some((self.id, id));
        out
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across repeated calls; use a fresh tape to reset.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        let (tid, loss_id) = loss.node.ok_or(Error::DetachedLoss)?;
        if tid != self.id {
            return Err(Error::DetachedLoss);
        }
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape().to_vec()));
        }

        let mut inner = self.inner.borrow_mut();
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        pass[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let Some(grad) = pass[id].take() else { continue };
            {
                let slot = &mut inner.grads[id];
                match slot {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += g;
                        }
                    }
                    None => *slot = Some(grad.clone()),
                }
            }
            let node = &inner.nodes[id];
            let Some(rule) = &node.rule else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let contribs = rule(&grad, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            let targets: Vec<(NodeId, Vec<f64>)> = node
                .parents
                .iter()
                .zip(contribs)
                .filter_map(|(p, c)| match (p, c) {
                    (Some(pid), Some(c)) => Some((*pid, c)),
                    _ => None,
                })
                .collect();
            for (pid, contrib) in targets {
                debug_assert!(pid < id, "tape out of topological order");
                match &mut pass[pid] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), contrib.len());
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient for a tensor bound to this tape (by node handle
    /// or by buffer identity for leaves). `None` when no gradient flowed.
    pub fn grad_of(&self, t: &Tensor) -> Option<Vec<f64>> {
        let inner = self.inner.borrow();
        let id = match t.node {
            Some((tid, nid)) if tid == self.id => Some(nid),
            _ => {
                let key = std::sync::Arc::as_ptr(t.buffer()) as usize;
                inner.leaves.get(&key).copied()
            }
        }?;
        inner.grads[id].clone()
    }

    /// Gradient for a leaf, zeros when nothing flowed to it.
    pub fn grad_or_zero(&self, t: &Tensor) -> Vec<f64> {
        self.grad_of(t).unwrap_or_else(|| vec![0.0; t.numel()])
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn leaf_binding_is_memoized() {
        let tape = Tape::new();
        let w = Tensor::zeros(&[3]).with_grad();
        let a = tape.leaf(&w);
        let b = tape.leaf(&w);
        assert_eq!(a.node, b.node);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn detached_inputs_record_nothing() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let y = ops::relu(&tape, &x);
        assert!(!y.is_attached());
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap().with_grad());
        let loss = ops::sum(&tape, &x);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[3], vec![0.5, 1.5, -2.0]).unwrap().with_grad());
        let loss = ops::sum(&tape, &x);
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape = Tape::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&loss), Err(Error::DetachedLoss)));
    }

    #[test]
    fn backward_rejects_loss_from_other_tape() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(&Tensor::scalar(2.0).with_grad());
        let loss = ops::sum(&t1, &x);
        assert!(matches!(t2.backward(&loss), Err(Error::DetachedLoss)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        let y = ops::relu(&tape, &x);
        assert!(matches!(tape.backward(&y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(x) -> grad 2 everywhere
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().with_grad());
        let a = ops::sum(&tape, &x);
        let b = ops::sum(&tape, &x);
        let loss = ops::add(&tape, &a, &b).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap(), vec![2.0, 2.0]);
    }
}
