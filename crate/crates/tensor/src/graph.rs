//! Eager evaluation with a backward tape.
//!
//! Every op computes its value immediately and, when any input requires a
//! gradient, records a closure mapping the output gradient to input
//! gradients. Nodes are append-only so the tape is topologically ordered by
//! construction.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Maps `(grad_out, inputs, output)` to one optional gradient per input.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A tape. One graph is driven by one thread; build a new graph per step.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A leaf that receives gradients.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.input(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.input(value, false)
    }

    fn input(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(TensorError::NonFiniteValue { op: "input" });
        }
        let id = self.push_node(Node {
            op: "input",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Ok(Var { graph: self, id })
    }

    /// Records an op. The value is checked for finiteness here so every
    /// forward op shares the same guard.
    pub(crate) fn record(
        &self,
        op: &'static str,
        parents: &[Var<'_, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(TensorError::NonFiniteValue { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let id = self.push_node(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var { graph: self, id })
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            if node.parents.iter().any(|&p| p >= id) {
                return Err(TensorError::GraphCycle { node: id });
            }
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward(&grad_out, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteValue { op: node.op });
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[id] = Some(grad_out);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros when `var` is not on a path to the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// A constant copy of this value, cut from the tape.
    pub fn detach(&self) -> Result<Var<'g, T>> {
        let value = self.value().clone();
        self.graph.constant(value)
    }

    pub(crate) fn same_graph(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.graph, other.graph)
    }
}
