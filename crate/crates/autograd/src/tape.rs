//! The tape: a flat record of the forward computation.

use std::cell::{Ref, RefCell};

use crate::{Real, Tensor};

/// Backward rule for one tape node. `needs[i]` tells the op whether the
/// gradient for input `i` will actually be consumed, so expensive ops can
/// skip dead inputs.
pub trait BackwardOp<T: Real> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    parents: Vec<usize>,
    op: Box<dyn BackwardOp<T>>,
}

struct Inner<T: Real> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    nodes: Vec<Option<Node<T>>>,
    requires: Vec<bool>,
}

/// Records a forward pass; `backward` fills gradients for every node that
/// (transitively) depends on a leaf.
pub struct Tape<T: Real> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                grads: Vec::new(),
                nodes: Vec::new(),
                requires: Vec::new(),
            }),
        }
    }

    fn push(&self, value: Tensor<T>, node: Option<Node<T>>, requires: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.grads.push(None);
        inner.nodes.push(node);
        inner.requires.push(requires);
        inner.values.len() - 1
    }

    /// A node that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, id: self.push(value, None, false) }
    }

    /// A gradient-carrying leaf (parameter or differentiable input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, id: self.push(value, None, true) }
    }

    /// Append an op node. `requires` is derived from the parents.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        op: Box<dyn BackwardOp<T>>,
    ) -> Var<'t, T> {
        let requires = {
            let inner = self.inner.borrow();
            parents.iter().any(|p| inner.requires[p.id])
        };
        let ids = parents.iter().map(|p| p.id).collect();
        Var { tape: self, id: self.push(value, Some(Node { parents: ids, op }), requires) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, var: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |inner| &inner.values[var.id])
    }

    pub fn value_clone(&self, var: Var<'_, T>) -> Tensor<T> {
        self.inner.borrow().values[var.id].clone()
    }

    /// Gradient accumulated for `var` by the last `backward` call.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.inner.borrow().grads[var.id].clone()
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var<'_, T>) {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        assert_eq!(inner.values[loss.id].numel(), 1, "backward needs a scalar loss");
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        inner.grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            if inner.grads[id].is_none() || !inner.requires[id] {
                continue;
            }
            let Some(node) = &inner.nodes[id] else { continue };
            let grad_out = inner.grads[id].clone().expect("checked above");
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| inner.requires[p]).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &inner.values[p]).collect();
            let grads_in =
                node.op.backward(&grad_out, &parent_vals, &inner.values[id], &needs);
            assert_eq!(grads_in.len(), node.parents.len(), "op returned wrong arity");
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(grads_in) {
                let Some(g) = g else { continue };
                if !inner.requires[p] {
                    continue;
                }
                assert_eq!(
                    g.shape(),
                    inner.values[p].shape(),
                    "gradient shape mismatch for node {p}"
                );
                match &mut inner.grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(*self)
    }

    pub fn value_clone(&self) -> Tensor<T> {
        self.tape.value_clone(*self)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }
}
