//! Reference-counted tensors and the reverse-mode tape.
//!
//! Every differentiable op that touches a gradient-tracking input attaches a
//! [`Node`] to its output holding the parents and a one-shot backward
//! closure. Node ids come from a monotone counter, so sorting the reachable
//! nodes by id descending replays them in exact reverse execution order.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::scalar::{DType, Scalar};
use crate::error::{dim_err, usage_err, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether new ops record onto the tape.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables tape recording until the guard is dropped.
#[must_use = "recording resumes when the guard is dropped"]
pub struct NoGradGuard {
    previous: bool,
}

pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { previous }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.previous));
    }
}

/// Gradient contributions for each parent, in parent order. `None` means
/// the parent receives nothing from this node.
pub(crate) type ParentGrads<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> ParentGrads<T>>;

pub(crate) struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: RefCell<Option<Node<T>>>,
}

/// N-dimensional row-major array that can take part in reverse-mode
/// differentiation. Cloning is cheap and shares storage.
pub struct Tensor<T: Scalar = f32>(Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node: RefCell::new(None),
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero extent"));
        }
        if numel(shape) != data.len() {
            return Err(dim_err!("shape {shape:?} needs {} elements, got {}", numel(shape), data.len()));
        }
        Ok(Self::build(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false)
    }

    /// Gradient-tracking leaf (a trainable parameter or a gradcheck input).
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::build(t.shape().to_vec(), t.to_vec(), true))
    }

    /// Returns a leaf copy that tracks gradients.
    pub fn requires_grad(&self) -> Self {
        Self::build(self.0.shape.clone(), self.to_vec(), true)
    }

    /// Returns a non-tracking copy of the values.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.to_vec(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.0.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(dim_err!("expected a 4-d tensor, got shape {other:?}")),
        }
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.borrow().is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the storage. Reserved for optimizers and
    /// initializers acting on leaves; mutating a tensor that is still
    /// referenced by a pending tape entry invalidates that entry.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad().map(|g| Self::build(self.0.shape.clone(), g, false))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Converts element type, producing a non-tracking tensor.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.borrow().iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect();
        Tensor::<U>::build(self.0.shape.clone(), data, false)
    }

    /// Output of an op. Attaches a tape node when recording is on and at
    /// least one parent tracks gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: impl FnOnce(&[T]) -> ParentGrads<T> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(Tensor::tracks_grad);
        let out = Self::build(shape, data, track);
        if track {
            *out.0.node.borrow_mut() = Some(Node { op, parents, backward: Box::new(backward) });
        }
        out
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tracking leaf (adding to any existing gradient) and consumes the tape
    /// entries it visited.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(usage_err!("backward needs a scalar loss, got shape {:?}", self.shape()));
        }
        if !self.tracks_grad() {
            return Err(usage_err!("loss is not connected to any gradient-tracking tensor"));
        }
        let tape = Tape::record(self);
        tape.replay(self)
    }
}

/// Reachable part of the graph behind one loss, in execution order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn record(loss: &Tensor<T>) -> Self {
        let mut seen: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![loss.clone()];
        while let Some(t) = stack.pop() {
            if !t.tracks_grad() || seen.contains_key(&t.id()) {
                continue;
            }
            if let Some(node) = t.0.node.borrow().as_ref() {
                stack.extend(node.parents.iter().cloned());
            }
            seen.insert(t.id(), t);
        }
        let mut nodes: Vec<_> = seen.into_values().collect();
        nodes.sort_by_key(Tensor::id);
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in execution order (leaves report `"leaf"`).
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|t| t.0.node.borrow().as_ref().map_or("leaf", |n| n.op)).collect()
    }

    fn replay(self, loss: &Tensor<T>) -> Result<()> {
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(loss.id(), vec![T::one()]);
        for t in self.nodes.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            let node = t.0.node.borrow_mut().take();
            match node {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let Node { parents, backward, .. } = node;
                    let contributions = backward(&g);
                    debug_assert_eq!(contributions.len(), parents.len());
                    for (parent, contrib) in parents.iter().zip(contributions) {
                        let Some(contrib) = contrib else { continue };
                        if !parent.tracks_grad() {
                            continue;
                        }
                        debug_assert_eq!(contrib.len(), parent.numel());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(parent.id(), contrib);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
