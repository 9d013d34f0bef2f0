//! Reverse-mode differentiation tape.
//!
//! Every operation appends one node holding its output value and, when any
//! input needs a gradient, a [`Backward`] rule. `Tape::backward` walks the
//! nodes in exact reverse order of execution, so a node's gradient is complete
//! before its rule runs.

use std::cell::{Cell, Ref, RefCell};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad_out: &[T], sink: &mut GradSink<'_, T>);
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) requires_grad: bool,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    param: Option<(u64, usize)>,
}

/// Read access to the inputs and output of the node being differentiated.
pub struct BackwardCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    inputs: &'a [usize],
    out: &'a Node<T>,
}

impl<'a, T: Scalar> BackwardCtx<'a, T> {
    pub fn input(&self, k: usize) -> &'a [T] {
        &self.nodes[self.inputs[k]].value
    }

    pub fn input_shape(&self, k: usize) -> &'a [usize] {
        &self.nodes[self.inputs[k]].shape
    }

    pub fn output(&self) -> &'a [T] {
        &self.out.value
    }

    pub fn output_shape(&self) -> &'a [usize] {
        &self.out.shape
    }
}

/// Accumulates input gradients; inputs that do not require a gradient are skipped.
pub struct GradSink<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    inputs: &'a [usize],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub fn wants(&self, k: usize) -> bool {
        self.nodes[self.inputs[k]].requires_grad
    }

    /// Mutable gradient buffer of input `k`, zero-initialised on first use.
    pub fn slot(&mut self, k: usize) -> Option<&mut [T]> {
        let id = self.inputs[k];
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    pub fn add(&mut self, k: usize, g: &[T]) {
        if let Some(slot) = self.slot(k) {
            for (a, &b) in slot.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push_node(Node { shape, value: t.into_data(), requires_grad, inputs: vec![], rule: None, param: None })
    }

    pub(crate) fn param_leaf(&self, t: Tensor<T>, trainable: bool, key: (u64, usize)) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push_node(Node {
            shape,
            value: t.into_data(),
            requires_grad: trainable,
            inputs: vec![],
            rule: None,
            param: Some(key),
        })
    }

    /// Record an operation result. The rule is dropped when no input needs a gradient.
    pub fn push<B: Backward<T> + 'static>(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        inputs: &[Var<'_, T>],
        rule: B,
    ) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let nodes = self.nodes.borrow();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        let rule: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(rule)) } else { None };
        self.push_node(Node {
            shape,
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            rule,
            param: None,
        })
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub(crate) fn check_owned(&self, vars: &[Var<'_, T>]) -> Result<()> {
        if vars.iter().all(|v| std::ptr::eq(v.tape, self)) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Propagate d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.check_owned(&[loss])?;
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        self.consumed.set(true);
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !root.requires_grad {
            return Ok(());
        }
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.rule.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            {
                let ctx = BackwardCtx { nodes: &nodes, inputs: &node.inputs, out: node };
                let mut sink = GradSink { nodes: &nodes, inputs: &node.inputs, grads: &mut grads[..id] };
                rule.backward(&ctx, &g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradient of a node after backward; `None` when it needs none or was unreachable.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        let node = &nodes[var.id];
        if !node.requires_grad {
            return None;
        }
        let g = grads.get(var.id).and_then(|g| g.clone()).unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor::new(&node.shape, g).expect("gradient matches node shape"))
    }

    pub(crate) fn param_grads(&self, set_uid: u64) -> Vec<(usize, Vec<T>)> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.param {
                Some((uid, index)) if uid == set_uid && n.requires_grad => {
                    grads.get(id).and_then(|g| g.clone()).map(|g| (index, g))
                }
                _ => None,
            })
            .collect()
    }

    /// True when any leaf bound from the given parameter set received a gradient entry.
    pub fn touched_params(&self, set_uid: u64) -> bool {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        nodes.iter().enumerate().any(|(id, n)| {
            matches!(n.param, Some((uid, _)) if uid == set_uid)
                && grads.get(id).map_or(false, |g| g.as_ref().map_or(false, |g| g.iter().any(|v| !v.is_zero())))
        })
    }
}

/// Handle to a node of a [`Tape`].
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("node value matches shape")
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}
