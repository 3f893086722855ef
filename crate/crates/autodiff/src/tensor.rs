//! The tensor value type and the dynamic reverse-mode graph.
//!
//! Every operation that has at least one input requiring a gradient records
//! a [`GradFn`] on its output node: the inputs plus a closure computing the
//! vector-Jacobian product. [`Tensor::backward`] walks those records once in
//! reverse topological order. Nothing is recorded when no input requires a
//! gradient, so inference carries no graph.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::real::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Computes input gradients from the output gradient.
///
/// Receives the output gradient and, per input, whether a gradient is
/// wanted. Returns one entry per input (`None` when not wanted).
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct GradFn<T: Real> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// N-dimensional row-major array with optional gradient tracking.
pub struct Tensor<T: Real = f64> {
    node: Arc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape);
        if self.numel() <= 16 {
            d.field("data", &self.node.data);
        }
        if let Some(g) = &self.node.grad_fn {
            d.field("op", &g.name);
        }
        d.field("requires_grad", &self.node.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::dim(op, format!("zero extent in shape {shape:?}")));
    }
    if numel_of(shape) != len {
        return Err(TensorError::dim(
            op,
            format!("shape {shape:?} holds {} elements, data has {len}", numel_of(shape)),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// A constant (no gradient) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape("tensor", shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    /// A leaf that accumulates a gradient during [`Tensor::backward`].
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape("param", shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), true, None))
    }

    /// Leaf over a shared buffer, without copying.
    pub fn from_shared(data: Arc<Vec<T>>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        check_shape("from_shared", shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, requires_grad, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![v]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self::from_parts(shape.to_vec(), Arc::new(vec![v; numel_of(shape)]), false, None)
    }

    /// Records the result of an operation.
    ///
    /// `backward` is kept only when some input requires a gradient. It must
    /// capture input data buffers rather than input tensors, so that graphs
    /// unlink iteratively on drop.
    pub fn from_op<F>(
        name: &'static str,
        data: impl Into<Arc<Vec<T>>>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let data: Arc<Vec<T>> = data.into();
        debug_assert_eq!(numel_of(&shape), data.len(), "{name}: output shape/data mismatch");
        #[cfg(debug_assertions)]
        {
            if inputs.iter().all(|t| t.is_finite()) && data.iter().any(|v| !v.is_finite()) {
                panic!("{name}: non-finite output from finite inputs");
            }
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            inputs,
            backward: Box::new(backward),
        });
        Self::from_parts(shape, data, requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient of a leaf, if any was written.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.node.shape.clone(), Arc::clone(&self.node.data), false, None)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    /// Name of the operation that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    /// Reverse-mode sweep from a scalar.
    ///
    /// Every recorded op is visited once; gradients reaching a node along
    /// several paths are summed before its own backward runs. Leaf gradients
    /// are added to any gradient already stored on the leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(TensorError::contract(
                "backward",
                "loss does not depend on any tensor requiring grad",
            ));
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let wants: Vec<bool> = gf.inputs.iter().map(|i| i.requires_grad()).collect();
                    let in_grads = (gf.backward)(&g, &wants);
                    debug_assert_eq!(in_grads.len(), gf.inputs.len(), "{}: grad arity", gf.name);
                    for (input, ig) in gf.inputs.iter().zip(in_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{}: grad length", gf.name);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable through recorded ops, inputs before consumers.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for input in gf.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Number of recorded ops reachable from this tensor.
    pub fn graph_len(&self) -> usize {
        self.topo_order().iter().filter(|t| !t.is_leaf()).count()
    }
}

impl<T: Real> Drop for Node<T> {
    fn drop(&mut self) {
        // Unlink long op chains iteratively so deep graphs do not overflow the stack.
        let Some(gf) = self.grad_fn.take() else { return };
        let mut pending: Vec<Tensor<T>> = gf.inputs;
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.node) {
                if let Some(gf) = node.grad_fn.take() {
                    pending.extend(gf.inputs);
                }
            }
        }
    }
}
