//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and returns a [`Gradients`]
//! store. Nodes whose inputs do not require gradients never allocate a
//! backward closure, so frozen (teacher) forward passes cost no more than
//! plain evaluation.
//!
//! Image tensors use the `[batch, channel, height, width]` layout throughout.

mod conv;
mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use conv::{col2im, im2col};
pub use ops::{shrink, sigmoid, PROB_EPS};

/// Dense n-dimensional tensor in standard (row-major) layout.
pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Running-statistic update emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub name: String,
    pub value: Tensor,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
    buffer_updates: RefCell<Vec<BufferUpdate>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value held by `v`. Cheap: values are reference counted.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "scalar() on a tensor of {} elements", value.len());
        value.iter().next().copied().unwrap_or(0.0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.insert(standardize(value), Vec::new(), None, false)
    }

    pub fn constant_scalar(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// An anonymous differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.insert(standardize(value), Vec::new(), None, true)
    }

    /// A named trainable parameter. Repeated calls with the same name return
    /// the same leaf so gradients from several uses accumulate.
    pub fn param(&self, name: &str, value: &Tensor) -> Var {
        if let Some(v) = self.params.borrow().get(name) {
            return *v;
        }
        let v = self.leaf(value.clone());
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Names and handles of every parameter registered so far.
    pub fn params(&self) -> BTreeMap<String, Var> {
        self.params.borrow().clone()
    }

    pub fn record_buffer_update(&self, name: String, value: Tensor) {
        self.buffer_updates.borrow_mut().push(BufferUpdate { name, value });
    }

    /// Drains the batch-norm running-statistic updates recorded so far.
    pub fn take_buffer_updates(&self) -> Vec<BufferUpdate> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    fn insert(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records a derived value. `make_backward` only runs when at least one
    /// input requires a gradient.
    pub(crate) fn push<F>(&self, value: Tensor, inputs: &[Var], make_backward: F) -> Var
    where
        F: FnOnce() -> BackwardFn,
    {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        if requires_grad {
            let parents = inputs.iter().map(|v| v.0).collect();
            self.insert(value, parents, Some(make_backward()), true)
        } else {
            self.insert(value, Vec::new(), None, false)
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&parent, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    match &mut grads[parent] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every named parameter of `graph`; parameters that did
    /// not reach the loss get zeros.
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .params()
            .into_iter()
            .map(|(name, v)| {
                let g = match self.get(v) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(graph.value(v).raw_dim()),
                };
                (name, g)
            })
            .collect()
    }
}

fn standardize(value: Tensor) -> Tensor {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().into_owned()
    }
}
