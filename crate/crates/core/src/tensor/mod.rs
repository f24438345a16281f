//! Reverse-mode autodiff over dense row-major tensors.
//!
//! Every operation builds a node in a dynamically-grown computation graph.
//! Nodes hold `Rc` edges to their parents plus a boxed backward closure;
//! calling [`Tensor::backward`] on a scalar runs the closures in reverse
//! topological order (node ids are allocated monotonically, so sorting by id
//! is a valid topological order) and accumulates gradients into every
//! reachable node that requires them.
//!
//! Graphs are thread-local by construction (`Rc`), but the underlying data
//! buffers are `Arc<Vec<E>>`, so parameter snapshots can cross threads and be
//! re-bound into fresh graphs cheaply.

mod conv;
pub mod element;
pub mod gradcheck;
mod matmul;
mod norm;
mod ops;
pub mod serialize;

pub use element::Element;
pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckReport};

use crate::{Error, Result};
use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording any graph structure. Forward values are
/// computed as usual but nothing inside requires grad, which keeps
/// evaluation memory flat.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD_DEPTH.with(|c| c.set(c.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|c| c.set(c.get() - 1));
    out
}

fn grad_disabled() -> bool {
    NO_GRAD_DEPTH.with(|c| c.get() > 0)
}

type BackwardFn<E> = Box<dyn Fn(&Node<E>, &[E])>;

pub(crate) struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward_fn: Option<BackwardFn<E>>,
    grad: RefCell<Option<Vec<E>>>,
}

/// A dense row-major tensor, cheap to clone (clones share the node).
pub struct Tensor<E: Element = f32> {
    node: Rc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

// ── construction ──────────────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    /// Leaf tensor from raw data. `requires_grad` is false; see
    /// [`Tensor::leaf`] for trainable leaves.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape("from_vec", shape, data.len()));
        }
        Ok(Self::new_leaf(Arc::new(data), shape.to_vec(), false))
    }

    /// Trainable leaf from shared data (used by the parameter store).
    pub fn leaf(data: Arc<Vec<E>>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape("leaf", shape, data.len()));
        }
        Ok(Self::new_leaf(data, shape.to_vec(), requires_grad && !grad_disabled()))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(Arc::new(vec![E::ZERO; numel]), shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_leaf(Arc::new(vec![value; numel]), shape.to_vec(), false)
    }

    pub fn scalar(value: E) -> Self {
        Self::new_leaf(Arc::new(vec![value]), vec![1], false)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = (0..numel).map(&mut f).collect();
        Self::new_leaf(Arc::new(data), shape.to_vec(), false)
    }

    fn new_leaf(data: Arc<Vec<E>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                parents: Vec::new(),
                backward_fn: None,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Internal: result node of an op. When no parent requires grad (or grad
    /// recording is disabled) the edges and closure are dropped so dead
    /// graphs never accumulate.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward_fn: BackwardFn<E>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let track = !grad_disabled() && parents.iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad: track,
                parents: if track { parents } else { Vec::new() },
                backward_fn: if track { Some(backward_fn) } else { None },
                grad: RefCell::new(None),
            }),
        }
    }
}

// ── accessors ─────────────────────────────────────────────────────────────

impl<E: Element> Tensor<E> {
    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    /// Shared handle to the underlying buffer.
    pub fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.node.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data[0]
    }

    /// Gradient accumulated by the last [`Tensor::backward`] call, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_vec(
            self.data().iter().map(|v| v.to_f64()).collect(),
            self.shape(),
        )
        .expect("shape preserved")
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor::from_vec(
            self.data().iter().map(|v| v.to_f32()).collect(),
            self.shape(),
        )
        .expect("shape preserved")
    }
}

// ── backward pass ─────────────────────────────────────────────────────────

impl<E: Element> Node<E> {
    /// Add `f`'s output into this node's gradient buffer, allocating zeros on
    /// first touch. No-op when the node does not require grad.
    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [E])) {
        if !self.requires_grad {
            return;
        }
        let mut slot = self.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::ZERO; self.data.len()]);
        f(buf);
    }

    pub(crate) fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub(crate) fn parent(&self, i: usize) -> &Tensor<E> {
        &self.parents[i]
    }
}

impl<E: Element> Tensor<E> {
    /// Accumulate into this tensor's grad buffer (helper for backward
    /// closures).
    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [E])) {
        self.node.accumulate_grad(f);
    }

    /// Run reverse-mode accumulation from this scalar. Gradients add into
    /// every reachable `requires_grad` node; leaves keep theirs until
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape("backward", "scalar [1]", self.shape()));
        }
        if !self.node.requires_grad {
            return Err(Error::Numeric(
                "backward() on a tensor that does not require grad".into(),
            ));
        }

        // Collect the reachable subgraph (iterative DFS; graphs can be deep).
        let mut topo: Vec<Rc<Node<E>>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<Rc<Node<E>>> = vec![Rc::clone(&self.node)];
        while let Some(n) = stack.pop() {
            if !seen.insert(n.id) {
                continue;
            }
            for p in &n.parents {
                if p.node.requires_grad {
                    stack.push(Rc::clone(&p.node));
                }
            }
            topo.push(n);
        }
        // Children always have larger ids than parents, so descending id
        // order is reverse-topological.
        topo.sort_unstable_by(|a, b| b.id.cmp(&a.id));

        self.node.accumulate_grad(|g| g[0] += E::ONE);

        for n in &topo {
            let Some(backward_fn) = &n.backward_fn else {
                continue;
            };
            let grad = n.grad.borrow().clone();
            if let Some(grad) = grad {
                backward_fn(n, &grad);
                // Interior gradients are not needed after their node has
                // propagated; freeing them caps backward memory.
                if !n.parents.is_empty() {
                    *n.grad.borrow_mut() = None;
                }
            }
        }
        Ok(())
    }
}

// ── shape utilities ───────────────────────────────────────────────────────

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        let err = Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn backward_requires_scalar() {
        let a = Tensor::<f64>::leaf(Arc::new(vec![1.0, 2.0]), &[2], true).unwrap();
        assert!(a.backward().is_err());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let a = Tensor::<f64>::leaf(Arc::new(vec![1.0, 2.0]), &[2], true).unwrap();
        let out = no_grad(|| a.mul(&a).unwrap().sum_all());
        assert!(!out.requires_grad());
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let a = Tensor::<f64>::leaf(Arc::new(vec![3.0]), &[1], true).unwrap();
        let y1 = a.mul(&a).unwrap(); // a^2, dy/da = 6
        y1.backward().unwrap();
        let y2 = a.scale(2.0); // 2a, dy/da = 2
        y2.backward().unwrap();
        assert_eq!(a.grad().unwrap()[0], 8.0);
    }
}
