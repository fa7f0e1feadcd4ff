//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Node ids increase with creation order, so iterating ids downwards is a
//! reverse topological order and each node is visited exactly once.
//!
//! Model parameters live in a [`ParamStore`] outside any graph. Each forward
//! pass binds them as leaves with [`Graph::param`]; after
//! [`Graph::backward`] the store pulls the leaf gradients in with
//! [`ParamStore::accumulate`] (`+=`, cleared by [`ParamStore::zero_grad`]).

mod elementwise;
pub(crate) mod gemm;
mod linalg;
mod norm;
mod params;
pub(crate) mod spatial;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub use params::{Param, ParamId, ParamStore};
pub use spatial::{window_offsets, PadMode};

use crate::tensor::Tensor;

/// Everything a backward rule sees: the upstream gradient, the forward
/// output and the parent values.
pub struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    /// Whether parent `i` needs a gradient. Rules may skip work when false.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Maps the upstream gradient to one gradient per parent (`None` = skip).
pub type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    bound: RefCell<HashMap<usize, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
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

    /// Leaf that receives a gradient on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// Binds a parameter of `store` as a leaf. Repeated calls with the same
    /// id return the same node, so gradients from every use accumulate.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id.0) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.leaf(store.value(id).clone());
        self.bound.borrow_mut().insert(id.0, v.id);
        v
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom<'g>(&'g self, inputs: &[Var<'g>], value: Tensor, backward: BackwardFn) -> Var<'g> {
        let parents = inputs.iter().map(|v| v.id).collect();
        self.record(value, parents, backward)
    }

    pub(crate) fn record(&self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        if requires_grad {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a single-element `root`, seeding its gradient
    /// with 1. Leaf gradients add onto whatever earlier calls left behind.
    pub fn backward(&self, root: Var<'_>) {
        assert_eq!(root.len(), 1, "backward root must hold a single element");
        let nodes = self.nodes.borrow();
        let mut grads = self.grads.borrow_mut();
        grads.resize_with(nodes.len(), || None);
        let mut work: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        work[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(g) = work[id].take() else { continue };
            let Some(backward) = node.backward.as_ref() else {
                if node.requires_grad {
                    accumulate(&mut grads[id], &g);
                }
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &*nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pg), true) = (pg, nodes[p].requires_grad) {
                    debug_assert_eq!(pg.len(), nodes[p].value.len());
                    accumulate(&mut work[p], &pg);
                }
            }
        }
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        Some(Tensor::from_parts(v.shape(), g.clone()))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    pub(crate) fn bound_params(&self) -> Vec<(usize, usize)> {
        self.bound.borrow().iter().map(|(&p, &n)| (p, n)).collect()
    }

    pub(crate) fn grad_raw(&self, node: usize) -> Option<Vec<f64>> {
        self.grads.borrow().get(node).and_then(|g| g.clone())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    pub(crate) fn op(self, inputs: &[Var<'g>], value: Tensor, backward: BackwardFn) -> Var<'g> {
        self.graph.custom(inputs, value, backward)
    }
}
