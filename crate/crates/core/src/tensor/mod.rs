//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the crowd model needs: `conv2d`,
//! `batch_norm`, `relu`, `sigmoid`, `softmax`, `global_avg_pool`,
//! `linear`, `add`, plus a handful of scalar-reduction helpers used by the
//! losses. Each op records the tensors it was computed from together with a
//! closure that maps the output gradient back onto the inputs;
//! [`Tensor::backward`] replays those closures in reverse topological
//! order.
//!
//! Tensors are immutable once created, except for two controlled cases:
//! gradient buffers accumulate across `backward` calls until explicitly
//! zeroed, and the optimizer / gradient checker may rewrite the data of
//! leaf parameters between forward passes. Every op rejects non-finite
//! outputs, so NaN/Inf surfaces as an error instead of propagating.

mod check;
mod ops;

pub use check::{finite_diff_check, CheckEntry, CheckReport, FdOptions};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Whether a stateful op (batch norm) normalizes with batch statistics and
/// updates running averages, or uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients for each parent given the node's output gradient and output
/// data. Entries align with the recorded parents; `None` marks a parent
/// that does not require a gradient.
type BackwardFn = Box<dyn Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    node: Option<Node>,
    /// f64 shadow of a scalar reduction, kept so the finite-difference
    /// checker is not limited by f32 quantization of the loss value.
    precise: Cell<Option<f64>>,
}

/// An n-dimensional row-major array of f32 values. Cloning is cheap (a
/// reference-count bump); the underlying buffer is shared.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument {
            op: "tensor",
            detail: format!("shape {shape:?} must be non-empty with positive dims"),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
                precise: Cell::new(None),
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = element_count(shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = element_count(shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = element_count(shape)?;
        Ok(Tensor::build(shape.to_vec(), vec![0.0; n], false, None))
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Tensor> {
        let n = element_count(shape)?;
        Ok(Tensor::build(shape.to_vec(), vec![value; n], false, None))
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(vec![1], vec![value], false, None)
    }

    /// Interior node produced by an op. Checks that every value is finite;
    /// a NaN or Inf in `data` is reported as an error attributed to `op`.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then_some(Node { parents, backward });
        Ok(Tensor::build(shape, data, requires_grad, node))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Read access to the underlying buffer. Hold the guard only briefly;
    /// the optimizer needs mutable access between steps.
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.inner.data.borrow()[0]
    }

    /// Current gradient, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    /// Reset the gradient buffer to zeros.
    pub fn zero_grad(&self) {
        let n = self.len();
        *self.inner.grad.borrow_mut() = Some(vec![0.0; n]);
    }

    /// Mutable access to leaf data for the optimizer and the gradient
    /// checker. Must not be called while a recorded graph that read this
    /// tensor is still going to be replayed.
    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.inner.data.borrow_mut()
    }

    fn accumulate_grad(&self, delta: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Populate the `grad` buffers of every gradient-requiring tensor
    /// reachable from this scalar. Repeated calls accumulate until the
    /// buffers are explicitly zeroed.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::InvalidArgument {
                op: "backward",
                detail: format!("loss must be a scalar, got shape {:?}", self.shape()),
            });
        }
        if !self.requires_grad() {
            return Err(Error::InvalidArgument {
                op: "backward",
                detail: "loss is not connected to any gradient-requiring tensor".into(),
            });
        }

        // Reverse postorder over parent edges = children before parents.
        let order = self.topo_order();

        let mut flow: std::collections::HashMap<u64, Vec<f32>> = std::collections::HashMap::new();
        flow.insert(self.inner.id, vec![1.0]);

        for t in order.iter().rev() {
            let dy = match flow.remove(&t.inner.id) {
                Some(dy) => dy,
                None => continue,
            };
            t.accumulate_grad(&dy);
            if let Some(node) = &t.inner.node {
                let out_data = t.inner.data.borrow();
                let parent_grads = (node.backward)(&dy, &out_data);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, grad) in node.parents.iter().zip(parent_grads) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    let grad = grad.expect("backward fn must produce a gradient for every gradient-requiring parent");
                    debug_assert_eq!(grad.len(), parent.len());
                    match flow.get_mut(&parent.inner.id) {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grad) {
                                *a += g;
                            }
                        }
                        None => {
                            flow.insert(parent.inner.id, grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative postorder: (tensor, index of next parent to expand).
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((t, pi)) = stack.pop() {
            let parent = t
                .inner
                .node
                .as_ref()
                .and_then(|n| n.parents.get(pi))
                .filter(|p| p.requires_grad())
                .cloned();
            match parent {
                Some(p) => {
                    stack.push((t, pi + 1));
                    if visited.insert(p.inner.id) {
                        stack.push((p, 0));
                    }
                }
                None => {
                    let more = t
                        .inner
                        .node
                        .as_ref()
                        .map_or(false, |n| pi < n.parents.len());
                    if more {
                        // Parent at pi does not require grad; skip it.
                        stack.push((t, pi + 1));
                    } else {
                        order.push(t);
                    }
                }
            }
        }
        order
    }
}

/// Per-channel batch normalization state: learnable scale/shift plus
/// running statistics used in eval mode.
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: RefCell<Vec<f32>>,
    running_var: RefCell<Vec<f32>>,
    pub momentum: f32,
    pub epsilon: f32,
}

impl BatchNormState {
    /// Fresh state: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize, momentum: f32, epsilon: f32) -> Result<BatchNormState> {
        if !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                detail: format!("momentum {momentum} must lie in (0,1)"),
            });
        }
        if epsilon <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                detail: format!("epsilon {epsilon} must be positive"),
            });
        }
        Ok(BatchNormState {
            gamma: Tensor::param(&[channels], vec![1.0; channels])?,
            beta: Tensor::param(&[channels], vec![0.0; channels])?,
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn running_mean(&self) -> Vec<f32> {
        self.running_mean.borrow().clone()
    }

    pub fn running_var(&self) -> Vec<f32> {
        self.running_var.borrow().clone()
    }

    /// Overwrite the running statistics (checkpoint restore).
    pub fn set_running_stats(&self, mean: Vec<f32>, var: Vec<f32>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!("running stats must have length {c}"),
            });
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "batch_norm",
                detail: "running variance must be strictly positive".into(),
            });
        }
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
        Ok(())
    }

    pub(crate) fn update_running(&self, batch_mean: &[f32], batch_var_unbiased: &[f32]) {
        let m = self.momentum;
        let mut rm = self.running_mean.borrow_mut();
        let mut rv = self.running_var.borrow_mut();
        for c in 0..rm.len() {
            rm[c] = (1.0 - m) * rm[c] + m * batch_mean[c];
            rv[c] = (1.0 - m) * rv[c] + m * batch_var_unbiased[c];
        }
        debug_assert!(rv.iter().all(|&v| v > 0.0));
    }
}
