//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a shaped, row-major buffer of 64-bit floats. Operations on
//! tensors record a backward rule into an implicit tape (the graph of parent
//! links); calling [`Tensor::backward`] on a scalar walks the graph in reverse
//! topological order and accumulates gradients additively at every fan-out.
//!
//! Tensors are immutable after creation except for gradient accumulation and
//! leaf-data updates between optimizer steps. The graph is single-threaded.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when operations record backward rules on the current thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// RAII guard disabling graph recording. Forward values are unchanged;
/// only the backward rules are skipped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = grad_enabled();
        GRAD_ENABLED.with(|g| g.set(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

/// Backward rule: receives (output gradient, output values) and accumulates
/// into the gradients of the captured parent tensors.
type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

pub(crate) struct Node {
    pub parents: Vec<Tensor>,
    pub backward: BackwardFn,
    pub op: &'static str,
}

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// A dense N-dimensional f64 array, optionally a node in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (no gradient tracking at the leaf).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                node: None,
            }),
        }
    }

    /// Learnable leaf: participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                node: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(shape, vec![v; numel_of(shape)])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    /// Records the result of an operation. The backward rule is attached only
    /// when recording is enabled and some parent participates in the graph, so
    /// a no-grad forward produces bitwise-identical values with no tape.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[f64]) + 'static,
    ) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "{op}: output shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let record = grad_enabled() && parents.iter().any(|p| p.needs_grad());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                node: if record {
                    Some(Node {
                        parents,
                        backward: Box::new(backward),
                        op,
                    })
                } else {
                    None
                },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Replaces the values of a leaf tensor (optimizer updates, gradcheck
    /// perturbations). Graph nodes are immutable.
    pub fn set_data(&self, data: &[f64]) {
        assert!(
            self.inner.node.is_none(),
            "set_data on a non-leaf tensor (op output)"
        );
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this tensor is a learnable leaf or depends on one.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Scales the accumulated gradient in place (global-norm clipping).
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        if !self.needs_grad() {
            return;
        }
        let mut gr = self.inner.grad.borrow_mut();
        match gr.as_mut() {
            Some(v) => {
                debug_assert_eq!(v.len(), g.len());
                for (a, b) in v.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *gr = Some(g.to_vec()),
        }
    }

    pub(crate) fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    fn ptr(&self) -> *const Inner {
        Rc::as_ptr(&self.inner)
    }

    /// Reverse-mode pass from a scalar. Every operation's backward rule runs
    /// exactly once, in reverse topological order; fan-out gradients add.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() starts from a scalar loss, got shape {:?}",
            self.shape()
        );
        let topo = self.topo_order();
        self.accum_grad(&[1.0]);
        for t in topo.iter().rev() {
            if let Some(node) = &t.inner.node {
                let g = t.inner.grad.borrow().clone();
                if let Some(g) = g {
                    let out = t.inner.data.borrow();
                    (node.backward)(&g, &out);
                }
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut topo: Vec<Tensor> = Vec::new();
        let mut done: HashSet<*const Inner> = HashSet::new();
        // Iterative post-order DFS; each node is emitted after its parents.
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        let mut entered: HashSet<*const Inner> = HashSet::new();
        while let Some((t, expanded)) = stack.pop() {
            let p = t.ptr();
            if expanded {
                if done.insert(p) {
                    topo.push(t);
                }
                continue;
            }
            if done.contains(&p) || !entered.insert(p) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for parent in &node.parents {
                    if parent.inner.node.is_some() && !done.contains(&parent.ptr()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        topo
    }

    /// First tensor in the graph below `self` (inputs first) whose values are
    /// not finite, reported by op name. Used for training diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        for t in self.topo_order() {
            if t.inner.data.borrow().iter().any(|v| !v.is_finite()) {
                return Some(t.op_name().unwrap_or("leaf"));
            }
        }
        None
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}", self.shape())?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", self.data().as_slice())?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn fanout_gradients_accumulate() {
        let x = Tensor::param(&[1], vec![3.0]);
        let y = ops::add(&x, &x);
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn no_grad_forward_is_bitwise_identical() {
        let x = Tensor::param(&[3], vec![0.3, -1.7, 2.2]);
        let with_tape = ops::sigmoid(&ops::mul(&x, &x)).to_vec();
        let guard = NoGradGuard::new();
        let no_tape_t = ops::sigmoid(&ops::mul(&x, &x));
        drop(guard);
        assert!(no_tape_t.op_name().is_none());
        for (a, b) in with_tape.iter().zip(no_tape_t.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_requires_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        x.backward();
    }
}
