//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its inputs and a backward rule on the implicit
//! graph; [`backward`] linearizes the graph into a [`Tape`] (topological
//! order, each node visited exactly once) and propagates gradients to all
//! tensors with `requires_grad`. Values are validated finite on
//! construction: NaN/Inf anywhere is surfaced as an error, never silently
//! propagated.
//!
//! Tensors are single-threaded handles (`Rc` + `RefCell`); values are
//! immutable during a forward/backward cycle and may only be rewritten
//! between steps through [`Tensor::set_data`] (the optimizer path).

mod ops;

pub mod adam;


pub use adam::Adam;
pub use ops::{concat, layer_norm, log_softmax, softmax};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{HiclError, Result};

/// Computes per-parent gradient contributions from the output gradient.
type BackwardRule = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    rule: Option<BackwardRule>,
}

/// Shared handle to a node of the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

fn next_id() -> u64 {
    use std::cell::Cell;
    thread_local! {
        static NEXT: Cell<u64> = const { Cell::new(1) };
    }
    NEXT.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HiclError::NonFinite {
            context: context.to_string(),
        })
    }
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        rule: Option<BackwardRule>,
        context: &str,
    ) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HiclError::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("shape product != data length {}", data.len()),
            });
        }
        check_finite(&data, context)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                parents,
                rule,
            }),
        })
    }

    /// New leaf tensor without gradient tracking.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(data, shape.to_vec(), false, Vec::new(), None, "from_vec")
    }

    /// New trainable leaf tensor (gradient buffer attached).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(data, shape.to_vec(), true, Vec::new(), None, "param")
    }

    /// Single-element tensor holding `v`.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(vec![v], &[1])
    }

    /// All-zero leaf tensor.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::build(
            vec![0.0; numel],
            shape.to_vec(),
            false,
            Vec::new(),
            None,
            "zeros",
        )
        .expect("zeros is always finite")
    }

    /// Graph-internal constructor for op outputs.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        op: &'static str,
        rule: BackwardRule,
    ) -> Result<Tensor> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::build(data, shape, true, parents, Some(rule), op)
        } else {
            // Constant subgraphs are cut off the tape entirely.
            Tensor::build(data, shape, false, Vec::new(), None, op)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggle gradient tracking on a leaf between steps (parameter
    /// freezing). Ops constructed afterwards treat the tensor as a constant;
    /// graphs are rebuilt every step, so already-built graphs are unaffected.
    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    /// Borrow the value buffer (row-major).
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        let d = self.inner.data.borrow();
        if d.len() != 1 {
            return Err(HiclError::Contract(format!(
                "item() on tensor of {} elements",
                d.len()
            )));
        }
        Ok(d[0])
    }

    /// Current gradient; zeros when no backward pass has reached this
    /// tensor yet. `None` iff `requires_grad` is false.
    pub fn grad(&self) -> Option<Vec<f64>> {
        if !self.inner.requires_grad.get() {
            return None;
        }
        Some(
            self.inner
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![0.0; self.len()]),
        )
    }

    /// Reset the gradient buffer to zeros.
    pub fn zero_grad(&self) {
        if self.inner.requires_grad.get() {
            *self.inner.grad.borrow_mut() = None;
        }
    }

    /// Overwrite the value buffer in place (optimizer step path).
    pub fn set_data(&self, new: &[f64]) -> Result<()> {
        if new.len() != self.len() {
            return Err(HiclError::InvalidShape {
                op: "set_data",
                shape: self.inner.shape.clone(),
                reason: format!("replacement has {} elements", new.len()),
            });
        }
        check_finite(new, "set_data")?;
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    /// Constant copy disconnected from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(
            self.to_vec(),
            self.inner.shape.clone(),
            false,
            Vec::new(),
            None,
            "detach",
        )
        .expect("detached values were already validated")
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.inner.requires_grad.get() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Topological linearization of the graph below one root: every node's
/// inputs precede it, and the backward pass visits each node exactly once.
pub struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    /// Record the subgraph that can influence `root`, parents first.
    pub fn trace(root: &Tensor) -> Tape {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        if !root.requires_grad() {
            return Tape { order };
        }
        // Iterative post-order DFS: a node enters `order` after its parents.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.inner.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        Tape { order }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Node ids in tape order, with the ids of their inputs.
    pub fn recorded_ops(&self) -> Vec<(u64, Vec<u64>)> {
        self.order
            .iter()
            .map(|t| (t.id(), t.inner.parents.iter().map(Tensor::id).collect()))
            .collect()
    }

    fn run_backward(&self, root: &Tensor) {
        let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
        flowing.insert(root.id(), vec![1.0]);
        for node in self.order.iter().rev() {
            let Some(out_grad) = flowing.remove(&node.id()) else {
                continue;
            };
            node.accumulate_grad(&out_grad);
            if let Some(rule) = &node.inner.rule {
                let parent_grads = rule(&out_grad);
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    match flowing.get_mut(&parent.id()) {
                        Some(buf) => {
                            for (b, g) in buf.iter_mut().zip(&pg) {
                                *b += g;
                            }
                        }
                        None => {
                            flowing.insert(parent.id(), pg);
                        }
                    }
                }
            }
        }
    }
}

/// Reverse-mode pass from a scalar loss. Gradients accumulate into every
/// reachable `requires_grad` tensor; call [`Tensor::zero_grad`] between
/// steps to reset them.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(HiclError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let tape = Tape::trace(loss);
    tape.run_backward(loss);
    Ok(())
}
