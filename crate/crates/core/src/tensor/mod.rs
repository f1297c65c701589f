//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle (`Rc<RefCell<..>>`) to a flat row-major
//! buffer plus optional gradient state. Every differentiable operation that
//! touches at least one gradient-tracked input records an [`OpRecord`] on the
//! output; [`backward`] traces the resulting DAG into a [`GradTape`]
//! (topologically ordered, each node visited exactly once) and accumulates
//! gradients into the reachable leaves.
//!
//! Gradient accumulation is additive across uses and across backward calls;
//! callers zero grads explicitly between optimizer steps.

mod ops;

pub use ops::{concat_axis, concat_axis0};

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// One recorded operation: the inputs it consumed and the local gradient
/// rule mapping the output gradient to per-input gradients.
pub(crate) struct OpRecord {
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) rule: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>,
}

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<OpRecord>,
}

/// Dense n-dimensional array of f64 with an attached gradient record.
///
/// Cloning is shallow: clones share storage and gradient state.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_inner(inner: Inner) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(inner)),
        }
    }

    /// New leaf tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::Config(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::from_inner(Inner {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            op: None,
        }))
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self::from_inner(Inner {
            shape,
            data,
            requires_grad: false,
            grad: None,
            op: None,
        })
    }

    pub(crate) fn with_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        rule: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self::from_inner(Inner {
            shape,
            data,
            requires_grad: true,
            grad: None,
            op: Some(OpRecord { inputs, rule }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel_of(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![1.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value])
    }

    /// Leaf with i.i.d. N(0, std^2) entries drawn from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self::leaf(shape.to_vec(), data)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the flat row-major buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(idx.len(), inner.shape.len());
        let mut flat = 0;
        for (axis, &i) in idx.iter().enumerate() {
            assert!(i < inner.shape[axis], "index out of bounds");
            flat = flat * inner.shape[axis] + i;
        }
        inner.data[flat]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Toggle gradient tracking on a leaf. The bi-level trainer uses this to
    /// freeze one level's parameters while the other steps.
    pub fn set_requires_grad(&self, requires: bool) {
        self.inner.borrow_mut().requires_grad = requires;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Ensure a gradient buffer exists (all zeros if absent). Used when a
    /// parameter legitimately sits outside the current graph, e.g. box type
    /// vectors while box prompting is disabled.
    pub fn ensure_zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if inner.grad.is_none() {
            inner.grad = Some(vec![0.0; inner.data.len()]);
        }
    }

    /// Overwrite the buffer with `data` (same length). Clears nothing else.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// In-place mutable access to the buffer, for optimizer updates and
    /// finite-difference probes.
    pub fn update_data<F: FnOnce(&mut [f64])>(&self, f: F) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Deep copy of shape+data as a fresh untracked leaf.
    pub fn value_copy(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::leaf(inner.shape.clone(), inner.data.clone())
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Identity of the shared storage, used as the node key during tracing.
    pub(crate) fn node_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// True if this tensor participates in gradient flow (tracked leaf or
    /// output of a recorded op).
    pub(crate) fn tracks_grad(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.op.is_some()
    }

}

/// Ordered list of operation records reachable from one root, inputs before
/// outputs. Built by depth-first trace; `run` visits each record exactly once.
pub struct GradTape {
    order: Vec<Tensor>,
}

impl GradTape {
    /// Trace the DAG under `root` into topological order.
    pub fn trace(root: &Tensor) -> GradTape {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, children_done)) = stack.pop() {
            if children_done {
                order.push(node);
                continue;
            }
            if !visited.insert(node.node_id()) {
                continue;
            }
            stack.push((node.clone(), true));
            let inner = node.inner.borrow();
            if let Some(op) = &inner.op {
                for input in &op.inputs {
                    if input.tracks_grad() && !visited.contains(&input.node_id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        GradTape { order }
    }

    /// Number of traced nodes.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Propagate gradients from `root` (seeded with 1.0) down the tape,
    /// accumulating into every reachable leaf that requires grad.
    pub fn run(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.shape(),
            });
        }
        let mut flows: HashMap<usize, Vec<f64>> = HashMap::new();
        flows.insert(root.node_id(), vec![1.0]);
        for node in self.order.iter().rev() {
            let Some(flow) = flows.remove(&node.node_id()) else {
                continue;
            };
            let is_leaf = {
                let inner = node.inner.borrow();
                if let Some(op) = &inner.op {
                    let input_grads = (op.rule)(&flow);
                    debug_assert_eq!(input_grads.len(), op.inputs.len());
                    for (input, grad) in op.inputs.iter().zip(input_grads) {
                        if !input.tracks_grad() {
                            continue;
                        }
                        let slot = flows
                            .entry(input.node_id())
                            .or_insert_with(|| vec![0.0; grad.len()]);
                        debug_assert_eq!(slot.len(), grad.len());
                        for (s, g) in slot.iter_mut().zip(&grad) {
                            *s += g;
                        }
                    }
                    false
                } else {
                    inner.requires_grad
                }
            };
            if is_leaf {
                let mut inner = node.inner.borrow_mut();
                let grad = inner
                    .grad
                    .get_or_insert_with(|| vec![0.0; flow.len()]);
                for (g, f) in grad.iter_mut().zip(&flow) {
                    *g += f;
                }
            }
        }
        Ok(())
    }
}

/// Reverse-mode backward pass from a scalar loss.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { shape: loss.shape() });
    }
    GradTape::trace(loss).run(loss)
}

/// FNV-1a over the IEEE-754 bit patterns; identical buffers hash equal,
/// any single-bit change hashes different with overwhelming probability.
pub fn tensor_checksum(t: &Tensor) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let inner = t.inner.borrow();
    for &dim in &inner.shape {
        for byte in (dim as u64).to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    for v in &inner.data {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}
