//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] is a reference-counted node. Operations executed on
//! tensors that require gradients record their parents and a backward
//! closure on the output node, so the graph is implicit in the `Rc` links.
//! Node ids are handed out from a monotonic counter, which makes "sort by id,
//! descending" a valid reverse topological order for [`Tensor::backward`].
//!
//! Layout is row-major; 4-D tensors are `[batch, channel, height, width]`.

mod conv;
mod norm;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub use norm::BatchStats;
pub use ops::Axes;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Gradients produced by a backward closure, one slot per parent.
/// `None` means "this parent does not need a gradient".
pub(crate) type ParentGrads = Vec<Option<Vec<f64>>>;

/// `(output grad, parents, which parents need grads)`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &[bool]) -> ParentGrads>;

struct OpRecord {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<OpRecord>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Creates a leaf tensor. Fails when `data` does not fill `shape` or an
    /// extent is zero.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() {
            return Err(Error::Shape("shape must have at least one extent".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        Tensor::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    /// Leaf with entries drawn uniformly from `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor {
        let data = (0..numel(shape)).map(|_| rng.uniform_range(lo, hi)).collect();
        Tensor::new(shape, data).expect("generated data fills the shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Marks a leaf as trainable. Returns a new handle sharing nothing with
    /// the old one.
    pub fn requires_grad(self) -> Tensor {
        let data = self.to_vec();
        Tensor::leaf(self.0.shape.clone(), data, true)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    /// Builds the output of a differentiable op. Parents are only retained
    /// when at least one of them participates in differentiation.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: bad output size");
        let tracked = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let op = tracked.then(|| OpRecord {
            name,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward,
        });
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad: tracked,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Intended for leaves (optimizer updates,
    /// finite differences); mutating an interior node invalidates any graph
    /// built on top of it.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn is_requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Detached copy with no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulates `d(self)/d(leaf)` into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.0.shape.clone()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }

        // Collect the reachable tracked sub-graph.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            if let Some(op) = &t.0.op {
                for p in &op.parents {
                    if p.0.requires_grad && !seen.contains(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in &nodes {
            let Some(gout) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(g) => g.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                        None => *slot = Some(gout),
                    }
                }
                Some(op) => {
                    let needs: Vec<bool> = op.parents.iter().map(|p| p.0.requires_grad).collect();
                    let grads = (op.backward)(&gout, &op.parents, &needs);
                    debug_assert_eq!(grads.len(), op.parents.len(), "{}", op.name);
                    for ((parent, g), need) in op.parents.iter().zip(grads).zip(needs) {
                        let (Some(g), true) = (g, need) else { continue };
                        debug_assert_eq!(g.len(), parent.numel(), "{}", op.name);
                        match pending.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.0.id, g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &preview)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
