use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::shape::numel;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static ALLOCATED: Cell<u64> = const { Cell::new(0) };
}

/// Total floats allocated for tensor storage on this thread since the last
/// [`reset_allocated_floats`].
pub fn allocated_floats() -> u64 {
    ALLOCATED.with(|c| c.get())
}

pub fn reset_allocated_floats() {
    ALLOCATED.with(|c| c.set(0));
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

/// Maps the upstream gradient to one optional gradient per parent. The
/// second argument marks which parents actually need one.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradNode {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<GradNode>,
}

/// Reference-counted, immutable n-dimensional array of `f64`.
///
/// Cloning is cheap and shares storage. Parameters are updated by replacing
/// the tensor, never by mutating data in place.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        if self.0.data.len() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<GradNode>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        ALLOCATED.with(|c| c.set(c.get() + data.len() as u64));
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.requires_grad_(true))
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Self::build(data.to_vec(), vec![data.len()], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    /// Returns a leaf with the same data and the given gradient flag.
    pub fn requires_grad_(self, flag: bool) -> Self {
        let shape = self.0.shape.clone();
        let data = match Arc::try_unwrap(self.0) {
            Ok(inner) => inner.data,
            Err(shared) => shared.data.clone(),
        };
        Self::build(data, shape, flag, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Builds the result of an operation. `make_backward` is only invoked
    /// when the result participates in a graph.
    pub(crate) fn from_op<F>(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        parents: &[&Tensor],
        make_backward: F,
    ) -> Self
    where
        F: FnOnce() -> BackwardFn,
    {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::build(data, shape, false, None);
        }
        let node = GradNode {
            op,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: make_backward(),
        };
        Self::build(data, shape, true, Some(node))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the operation that produced this tensor, if it is a graph node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Errors on the first NaN or infinity.
    pub fn assert_finite(&self, label: &str) -> Result<()> {
        match self.0.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(TensorError::NonFinite {
                label: label.to_string(),
                index,
                value: self.0.data[index],
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients accumulate: calling this twice without [`Tensor::zero_grad`]
    /// adds the second sweep on top of the first.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::with_capacity(order.len());
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
                let grads = (node.backward)(&g, &needs);
                debug_assert_eq!(grads.len(), node.parents.len(), "op {}", node.op);
                for ((parent, pg), need) in node.parents.iter().zip(grads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel(), "op {}", node.op);
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }

    /// Post-order over the requires_grad subgraph; each node appears once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, next)) = stack.pop() {
            let parents = t.0.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((t, next + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}
