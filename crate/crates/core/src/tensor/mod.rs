//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation that touches a tensor requiring gradients records a
//! node pointing at its parents. [`Tensor::backward`] walks the reachable
//! graph once in reverse creation order, which is a valid reverse
//! topological order because parents are always created before children.

mod gemm;
mod grad_check;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use grad_check::{grad_check, grad_check_param};
pub(crate) use ops::Op;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Run `f` without recording any graph on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) struct Node {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    op: Option<Op>,
}

/// Reference-counted handle to a node of the computation graph.
///
/// Cloning is cheap and aliases the same node. Tensors are not `Send`;
/// use [`TensorData`] to move values across threads.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

/// Plain owned tensor contents, detached from any graph.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op,
        }))
    }

    /// Result of an operation: records `op` only if a parent needs gradients.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        if GRAD_ENABLED.with(Cell::get) && op.parents().iter().any(|p| p.requires_grad()) {
            Tensor::make(data, shape, true, Some(op))
        } else {
            Tensor::make(data, shape, false, None)
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!(
                    "shape {:?} holds {} elements, got {}",
                    shape,
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor::make(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::make(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![value], vec![], false, None)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        Tensor::make(
            rng.normal_vec(numel(shape), std),
            shape.to_vec(),
            false,
            None,
        )
    }

    pub fn from_data(d: &TensorData) -> Result<Tensor> {
        Tensor::from_vec(d.data.clone(), &d.shape)
    }

    pub fn to_data(&self) -> TensorData {
        TensorData {
            shape: self.shape().to_vec(),
            data: self.to_vec(),
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Only leaves may toggle; op outputs inherit from their parents.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.0.op.is_none(), "requires_grad is fixed for op outputs");
        self.0.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Mutate leaf storage in place (optimizer updates, finite differences).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.0.op.is_none(), "update_data on an op output");
        f(&mut self.0.data.borrow_mut());
    }

    pub fn set_data(&self, values: &[f64]) {
        self.update_data(|d| d.copy_from_slice(values));
    }

    /// New constant leaf holding a copy of the values.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Backpropagate from a single-element tensor. Leaf gradients
    /// accumulate across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut sink = GradSink::default();
        sink.map.insert(self.id(), vec![1.0]);
        for t in &order {
            let Some(g) = sink.map.remove(&t.id()) else {
                continue;
            };
            match &t.0.op {
                Some(op) => op.backward(&t.0, &g, &mut sink),
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-backward-call gradient buffers, keyed by node id.
#[derive(Default)]
pub(crate) struct GradSink {
    map: HashMap<usize, Vec<f64>>,
}

impl GradSink {
    /// Accumulation buffer for `t`, or `None` when `t` needs no gradient.
    pub(crate) fn acc(&mut self, t: &Tensor) -> Option<&mut Vec<f64>> {
        if !t.requires_grad() {
            return None;
        }
        let n = t.numel();
        Some(self.map.entry(t.id()).or_insert_with(|| vec![0.0; n]))
    }
}
