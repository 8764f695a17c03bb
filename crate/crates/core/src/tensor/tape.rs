use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Computes parent gradients from the output gradient, the parent values and
/// the output value. `None` marks a parent that receives nothing.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records one forward pass. Dropping the tape frees the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that does not require gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that requires gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    /// The parameter at `path` as a gradient-tracked leaf. Requesting the same
    /// path twice on one tape yields the same node.
    pub fn param<'t>(&'t self, store: &ParameterStore, path: &str) -> Result<Var<'t>> {
        if let Some(&id) = self.params.borrow().get(path) {
            return Ok(Var { tape: self, id });
        }
        let value = store
            .get(path)
            .ok_or_else(|| Error::State(format!("unknown parameter {path}")))?
            .clone();
        let v = self.leaf(value);
        self.params.borrow_mut().insert(path.to_string(), v.id);
        Ok(v)
    }

    /// Records the result of an operation. The backward closure is kept only
    /// when some input requires gradients.
    pub(crate) fn record<'t>(&'t self, value: Tensor, inputs: &[Var<'t>], backward: BackwardFn) -> Var<'t> {
        let requires = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        if requires {
            self.push(value, inputs.iter().map(|v| v.id).collect(), Some(backward), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let parent_grads = backward(&g, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut params = BTreeMap::new();
        for (path, &id) in self.params.borrow().iter() {
            let g = if id < grads.len() { grads[id].take() } else { None };
            let shape = nodes[id].value.shape();
            params.insert(path.clone(), g.unwrap_or_else(|| Tensor::zeros(shape[0], shape[1])));
        }
        Ok(Gradients { leaves: grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf (zeros are reported as `None`).
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(v.id).and_then(Option::as_ref)
    }

    /// Gradients for every parameter registered on the tape; parameters the
    /// loss does not reach get zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Same value, no link to the graph: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }
}
