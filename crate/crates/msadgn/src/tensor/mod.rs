//! Minimal reverse-mode autodiff over row-major `f64` tensors.
//!
//! A [`Tape`] records operations while active on the current thread;
//! [`Tensor::backward`] replays the recording in reverse and accumulates
//! gradients into every participating tensor that requires them. The op set
//! is exactly what the networks in this crate need — nothing more.

mod gradcheck;
mod ops;

pub use gradcheck::finite_diff_check;
pub use ops::{
    add, add_channel_bias, add_row_bias, concat_rows, conv1d, cross_entropy,
    cross_entropy_one_hot, grad_reverse, matmul, relu, reshape, scale, softmax, sum,
};

use crate::error::{Error, Result};
use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

/// Fills `local[i]` with d(loss)/d(input_i) given d(loss)/d(output).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut [Option<Vec<f64>>])>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    /// (tape id, node index) of the op that produced this tensor, if recorded.
    tape_token: Cell<Option<(u64, usize)>>,
}

/// A value in the computation graph. Cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                tape_token: Cell::new(None),
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::Dim(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel(shape)
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Dim(format!("zero-sized dimension in shape {shape:?}")));
        }
        Ok(Tensor::new(data, shape.to_vec(), false))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.to_vec()),
                grad: RefCell::new(None),
                requires_grad: true,
                tape_token: Cell::new(None),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], vec![1], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the underlying storage. Do not hold across op calls.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values in place (optimizer updates, perturbations).
    /// The graph recorded before this call still refers to the old values, so
    /// only mutate leaves between forward passes.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(values.len(), d.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Node index on `tape` if this tensor was produced there.
    fn node_on(&self, tape_id: u64) -> Option<usize> {
        match self.inner.tape_token.get() {
            Some((id, node)) if id == tape_id => Some(node),
            _ => None,
        }
    }

    /// Run reverse-mode differentiation from this scalar.
    ///
    /// Gradients accumulate into `grad` slots of every tensor with
    /// `requires_grad` that participated; repeated calls without
    /// [`Tensor::zero_grad`] keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let tape = Tape::active().ok_or_else(|| {
            Error::Contract("backward called with no active tape on this thread".into())
        })?;
        let root = self.node_on(tape.id()).ok_or_else(|| {
            Error::Contract("loss tensor is not recorded on the active tape".into())
        })?;
        tape.backward_from(root, self);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// One recorded operation: the tensors involved and a closure producing the
/// local input gradients from the upstream gradient.
struct Node {
    inputs: Vec<Tensor>,
    /// Producing node of each input at record time (same tape only).
    input_nodes: Vec<Option<usize>>,
    backward: BackwardFn,
}

struct TapeData {
    id: u64,
    nodes: Vec<Node>,
}

/// Recording context for one forward/backward cycle. Activate with
/// [`Tape::scope`]; ops record themselves only while a tape is active on the
/// current thread. Two concurrent runs must use separate threads (and thus
/// separate tapes).
#[derive(Clone)]
pub struct Tape {
    data: Rc<RefCell<TapeData>>,
}

thread_local! {
    static ACTIVE_TAPE: RefCell<Option<Tape>> = const { RefCell::new(None) };
    static NEXT_TAPE_ID: Cell<u64> = const { Cell::new(1) };
}

impl Tape {
    fn new() -> Tape {
        let id = NEXT_TAPE_ID.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        });
        Tape {
            data: Rc::new(RefCell::new(TapeData { id, nodes: Vec::new() })),
        }
    }

    fn id(&self) -> u64 {
        self.data.borrow().id
    }

    pub fn num_nodes(&self) -> usize {
        self.data.borrow().nodes.len()
    }

    fn active() -> Option<Tape> {
        ACTIVE_TAPE.with(|t| t.borrow().clone())
    }

    /// Run `f` with a fresh tape active on this thread. Nested scopes shadow
    /// the outer tape; the outer one is restored afterwards, including on
    /// early return.
    pub fn scope<R>(f: impl FnOnce(&Tape) -> R) -> R {
        let tape = Tape::new();
        let prev = ACTIVE_TAPE.with(|t| t.borrow_mut().replace(tape.clone()));
        let _restore = RestoreGuard { prev: Some(prev) };
        f(&tape)
    }

    /// Run `f` with recording suspended (pure eager evaluation).
    pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
        let prev = ACTIVE_TAPE.with(|t| t.borrow_mut().take());
        let _restore = RestoreGuard { prev: Some(prev) };
        f()
    }

    /// Record an op. Returns the node index for the output's tape token.
    fn record(&self, inputs: Vec<Tensor>, backward: BackwardFn) -> usize {
        let mut data = self.data.borrow_mut();
        let tape_id = data.id;
        let input_nodes = inputs.iter().map(|t| t.node_on(tape_id)).collect();
        data.nodes.push(Node { inputs, input_nodes, backward });
        data.nodes.len() - 1
    }

    /// Reverse sweep from `root`. Visits each node at most once, in reverse
    /// record order, so every upstream buffer is complete before use.
    fn backward_from(&self, root: usize, root_tensor: &Tensor) {
        let data = self.data.borrow();
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        upstream[root] = Some(vec![1.0]);
        root_tensor.accumulate_grad(&[1.0]);

        for idx in (0..=root).rev() {
            let Some(up) = upstream[idx].take() else { continue };
            let node = &data.nodes[idx];
            let mut local: Vec<Option<Vec<f64>>> = vec![None; node.inputs.len()];
            (node.backward)(&up, &mut local);
            for (j, contribution) in local.into_iter().enumerate() {
                let Some(contribution) = contribution else { continue };
                let input = &node.inputs[j];
                if input.requires_grad() {
                    input.accumulate_grad(&contribution);
                }
                if let Some(producer) = node.input_nodes[j] {
                    match upstream[producer].as_mut() {
                        Some(buf) => {
                            for (b, c) in buf.iter_mut().zip(&contribution) {
                                *b += c;
                            }
                        }
                        None => upstream[producer] = Some(contribution),
                    }
                }
            }
        }
    }
}

struct RestoreGuard {
    prev: Option<Option<Tape>>,
}

impl Drop for RestoreGuard {
    fn drop(&mut self) {
        if let Some(prev) = self.prev.take() {
            ACTIVE_TAPE.with(|t| *t.borrow_mut() = prev);
        }
    }
}

/// Record `output = op(inputs)` on the active tape when gradients are needed.
/// Marks the output `requires_grad` if any input requires it.
pub(crate) fn record_op(
    inputs: &[&Tensor],
    output_data: Vec<f64>,
    output_shape: Vec<usize>,
    backward: BackwardFn,
) -> Tensor {
    let needs_grad = inputs.iter().any(|t| t.requires_grad());
    let out = Tensor::new(output_data, output_shape, needs_grad);
    if needs_grad {
        if let Some(tape) = Tape::active() {
            let node = tape.record(inputs.iter().map(|&t| t.clone()).collect(), backward);
            out.inner.tape_token.set(Some((tape.id(), node)));
        }
    }
    out
}
