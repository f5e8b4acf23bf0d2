use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::ops::Op;

/// Dense n-dimensional `f64` array backing every tensor.
pub type Array = ArrayD<f64>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn set_grad_enabled(enabled: bool) -> bool {
    GRAD_ENABLED.with(|g| g.replace(enabled))
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Guard returned by [`no_grad`]; restores the previous recording mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub(crate) fn restore_on_drop(prev: bool) -> Self {
        GradModeGuard { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        set_grad_enabled(self.prev);
    }
}

/// Disables graph recording on the current thread until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    GradModeGuard {
        prev: set_grad_enabled(false),
    }
}

/// Re-enables graph recording on the current thread until the guard is dropped.
pub fn enable_grad() -> GradModeGuard {
    GradModeGuard {
        prev: set_grad_enabled(true),
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

/// A node in the computation graph.
///
/// Cloning is cheap (reference counted). Tensors are thread-local by
/// construction; move plain [`Array`]s across threads instead.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl Tensor {
    /// A leaf that never receives gradients.
    pub fn constant(value: Array) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: None,
        }))
    }

    /// A leaf that gradients are taken with respect to.
    pub fn variable(value: Array) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: None,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::constant(Array::from_shape_vec(IxDyn(shape), data).expect("shape matches data length"))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(Array::zeros(IxDyn(shape)))
    }

    pub(crate) fn from_op(value: Array, op: Op) -> Self {
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: track,
            op: if track { Some(op) } else { None },
        }))
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Copy of the value cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
