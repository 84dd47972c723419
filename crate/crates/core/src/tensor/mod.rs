//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation that consumes at least one gradient-tracking tensor records
//! itself (inputs plus a vector-Jacobian closure) on the output node. The
//! resulting DAG is the tape: [`Tape::record`] linearizes it in reverse creation
//! order, which is a valid reverse topological order because a node's inputs
//! always exist before the node does.

mod broadcast;
mod conv;
mod gradcheck;
mod linalg;
mod ops;
mod structural;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

pub use conv::ConvGeometry;
pub use gradcheck::{grad_check, GradCheckReport};

/// Vector-Jacobian product: `(grad_out, out_data) -> grad per input`.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &[S]) -> Vec<Option<Vec<S>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Recorded<S: Scalar> {
    name: &'static str,
    inputs: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<S>>>,
    op: Option<Recorded<S>>,
}

impl<S: Scalar> Drop for Node<S> {
    // Long recurrent graphs would otherwise drop recursively, one stack frame per op.
    fn drop(&mut self) {
        let Some(op) = self.op.take() else { return };
        // The closure holds clones of the inputs; release those first.
        let Recorded { inputs, backward, .. } = op;
        drop(backward);
        let mut pending: Vec<Tensor<S>> = inputs;
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.node) {
                if let Some(Recorded { inputs, backward, .. }) = node.op.take() {
                    drop(backward);
                    pending.extend(inputs);
                }
            }
        }
    }
}

/// An n-dimensional array of scalars, optionally participating in autodiff.
///
/// Cloning is cheap (reference counted). Data is immutable once created; only
/// the accumulated gradient of a leaf changes, through [`Tensor::backward`].
pub struct Tensor<S: Scalar> {
    node: Arc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape);
        if self.numel() <= 16 {
            d.field("data", &self.node.data);
        }
        d.field("requires_grad", &self.node.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn make(data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Option<Recorded<S>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("new", format!("zero extent in shape {shape:?}"));
        }
        if numel_of(shape) != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {} elements, got {}", numel_of(shape), data.len()),
            );
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates a gradient on backward.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.detach().tracked())
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| S::lit(v)).collect(), shape)
    }

    pub fn scalar(v: S) -> Self {
        Self::make(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::make(vec![v; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<S>) -> Self {
        let n = data.len();
        Self::make(data, vec![n], false, None)
    }

    /// Same values as a fresh leaf that tracks gradients.
    pub fn tracked(self) -> Self {
        if self.node.requires_grad && self.node.op.is_none() {
            return self;
        }
        Self::make(self.node.data.clone(), self.node.shape.clone(), true, None)
    }

    /// Same values, cut from the graph: no gradient flows through the result.
    pub fn detach(&self) -> Self {
        if !self.node.requires_grad {
            return self.clone();
        }
        Self::make(self.node.data.clone(), self.node.shape.clone(), false, None)
    }

    /// Output of a recorded operation. The backward closure is dropped when no
    /// input tracks gradients, so frozen or constant graphs cost nothing extra.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<S>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let op = requires_grad.then(|| Recorded { name, inputs, backward });
        Self::make(data, shape, requires_grad, op)
    }

    /// Like [`Tensor::from_op`] but rejects NaN outputs.
    pub(crate) fn from_op_checked(
        name: &'static str,
        data: Vec<S>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric { op: name });
        }
        Ok(Self::from_op(name, data, shape, inputs, backward))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.node.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Identity of the underlying node; stable across clones.
    pub fn id(&self) -> u64 {
        self.node.id
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.op.as_ref().map(|op| op.name)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let tape = Tape::record(self);
        tape.replay(self);
        Ok(())
    }
}

/// Linearized record of the operations reachable from a loss.
pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Collects every gradient-tracking node reachable from `root`, newest first.
    pub fn record(root: &Tensor<S>) -> Self {
        let mut seen = HashSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.node.op {
                stack.extend(op.inputs.iter().filter(|i| i.requires_grad()).cloned());
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by(|a, b| b.id().cmp(&a.id()));
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in replay order (`None` for leaves).
    pub fn op_names(&self) -> Vec<Option<&'static str>> {
        self.nodes.iter().map(|t| t.op_name()).collect()
    }

    fn replay(&self, root: &Tensor<S>) {
        let mut pending: HashMap<u64, Vec<S>> = HashMap::new();
        pending.insert(root.id(), vec![S::one()]);
        for t in &self.nodes {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.node.op {
                Some(op) => {
                    let grads = (op.backward)(&g, &t.node.data);
                    debug_assert_eq!(grads.len(), op.inputs.len(), "{}", op.name);
                    for (input, gi) in op.inputs.iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), input.numel(), "{} gradient extent", op.name);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
    }
}
