//! Minimal differentiable array engine.
//!
//! [`Tensor`] is a dense N-dimensional array (row-major) with optional
//! reverse-mode gradients. Operations record a computation graph when any
//! input requires gradients and gradient recording is enabled; calling
//! [`Tensor::backward`] on a scalar loss walks that graph and accumulates
//! `d(loss)/d(leaf)` into every reachable leaf that requires gradients.
//!
//! The element type is generic over [`Element`]: training code uses `f32`,
//! gradient-check tests use `f64`.

mod adam;
pub mod gradcheck;
mod linalg;
mod ops;

pub use adam::{Adam, AdamHyperParams, AdamState};
pub use ops::{concat_channels, softmax_cross_entropy, softmax_cross_entropy_spatial, softmax_rows};
pub(crate) use ops::Op;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts to element")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("element converts to f64")
    }
}

impl Element for f32 {}
impl Element for f64 {}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on the current thread.
///
/// Forward passes inside the closure build no graph even when parameters
/// require gradients, which keeps evaluation loops allocation-light.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.replace(false);
        let out = f();
        g.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Dense N-dimensional array with optional gradient.
///
/// Cloning a tensor clones a cheap shared handle; the underlying buffer is
/// shared. Data is mutable only through [`Tensor::apply_update`] (used by the
/// optimizer on leaf parameters), so graph nodes are effectively immutable.
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn new(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        // Ops call this only when recording; the output participates in autodiff.
        Tensor::new(shape, data, true, Some(op))
    }

    /// Leaf tensor from raw row-major data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {:?} contains a zero dimension",
                shape
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// Leaf parameter: like [`Tensor::from_vec`] but participating in autodiff.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::new(
            t.inner.shape.clone(),
            t.inner.data.read().unwrap().clone(),
            true,
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![T::zero(); numel], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel], false, None)
    }

    /// Scalar (shape `[1]`) tensor.
    pub fn scalar(value: T) -> Self {
        Tensor::new(vec![1], vec![value], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for leaves created by `from_vec`/`param`, false for op outputs.
    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub(crate) fn buf(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().unwrap()
    }

    /// Copy of the underlying row-major data.
    pub fn to_vec(&self) -> Vec<T> {
        self.buf().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.buf()[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().unwrap().clone()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    /// Mutates leaf data in place (optimizer updates). Panics on graph nodes.
    pub fn apply_update(&self, f: impl FnOnce(&mut [T])) {
        assert!(
            self.is_leaf(),
            "in-place updates are only allowed on leaf tensors"
        );
        let mut data = self.inner.data.write().unwrap();
        f(&mut data);
    }

    pub fn all_finite(&self) -> bool {
        self.buf().iter().all(|v| v.is_finite())
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.inner) as *const () as usize
    }

    fn accumulate_leaf_grad(&self, contribution: &[T]) {
        let mut slot = self.inner.grad.write().unwrap();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += *b;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Accumulates `d(self)/d(leaf)` into the gradient of every reachable
    /// leaf with `requires_grad`. Repeated calls without [`Tensor::zero_grad`]
    /// add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Usage(
                "backward on a tensor that is not part of a recorded computation".into(),
            ));
        }

        let order = self.topo_order();
        let mut flowing: HashMap<usize, Vec<T>> = HashMap::new();
        flowing.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(grad) = flowing.remove(&node.id()) else {
                continue;
            };
            match &node.inner.op {
                Some(op) => op.backward(&grad, node, &mut flowing),
                None => node.accumulate_leaf_grad(&grad),
            }
        }
        Ok(())
    }

    /// Parents first, children later; the root is last.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for parent in op.parents() {
                    if parent.inner.requires_grad && !visited.contains(&parent.id()) {
                        stack.push((parent, false));
                    }
                }
            }
        }
        order
    }
}

/// Accumulates a gradient contribution for `target` inside a backward pass.
pub(crate) fn flow_into<T: Element>(
    flowing: &mut HashMap<usize, Vec<T>>,
    target: &Tensor<T>,
    contribution: Vec<T>,
) {
    if !target.inner.requires_grad {
        return;
    }
    match flowing.entry(target.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&contribution) {
                *a += *b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}
