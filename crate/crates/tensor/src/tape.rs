use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::ops::Op;
use crate::{Real, Tensor};

struct Node<T: Real> {
    value: Tensor<T>,
    /// Position on the tape; `None` for values that need no gradient.
    slot: Option<usize>,
    op: Option<Op<T>>,
}

/// Handle to a value produced on a [`Tape`].
///
/// Cloning is cheap (reference counted). A `Var` keeps its producers alive
/// only while the tape is recording.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("slot", &self.0.slot)
            .finish()
    }
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.slot.is_some()
    }

    /// First element; intended for scalar (`[1]`) values.
    pub fn item(&self) -> T {
        self.0.value.data()[0]
    }

    pub(crate) fn slot(&self) -> Option<usize> {
        self.0.slot
    }

    pub(crate) fn ptr_eq(&self, other: &Var<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Ordered record of differentiable operations.
///
/// Every recorded node is appended after its inputs, so the tape order is a
/// topological order and [`Tape::backward`] is a single reverse sweep.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Var<T>>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records operations for backpropagation.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing; forward values only.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// A trainable leaf. On a no-grad tape this is the same as a constant.
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return self.constant(value);
        }
        self.record(value, None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var(Rc::new(Node {
            value,
            slot: None,
            op: None,
        }))
    }

    fn record(&self, value: Tensor<T>, op: Option<Op<T>>) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        let var = Var(Rc::new(Node {
            value,
            slot: Some(nodes.len()),
            op,
        }));
        nodes.push(var.clone());
        var
    }

    /// Wraps an op result, recording it only if some input needs a gradient.
    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<T> {
        if self.recording && op.inputs().iter().any(|v| v.requires_grad()) {
            self.record(value, Some(op))
        } else {
            self.constant(value)
        }
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of all leaves.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let Some(start) = loss.slot() else {
            return Ok(Gradients {
                grads: vec![None; nodes.len()],
            });
        };
        if start >= nodes.len() || !nodes[start].ptr_eq(loss) {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                detail: "loss was not recorded on this tape".into(),
            });
        }
        grads[start] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        for slot in (0..=start).rev() {
            let Some(g) = grads[slot].take() else {
                continue;
            };
            let node = &nodes[slot].0;
            match &node.op {
                None => {
                    leaf_grads[slot] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Some(op) => {
                    for (input, ig) in op.backward(&node.value, &g) {
                        let Some(s) = input.slot() else { continue };
                        match &mut grads[s] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            empty => *empty = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.slot()
            .and_then(|s| self.grads.get(s))
            .and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the loss does not reach it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
