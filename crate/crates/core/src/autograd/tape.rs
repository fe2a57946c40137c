//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a node's parents always precede
//! it and backward is a single reverse sweep over the node list.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Vector-Jacobian product of one recorded op.
///
/// Receives the gradient of the op output and a flag per parent saying
/// whether that parent needs a gradient; returns one optional gradient per
/// parent, each with the parent's element count.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
    params: RefCell<HashMap<u64, usize>>,
    staged: RefCell<Vec<(u64, Tensor)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            op: "const",
            value,
            parents: Vec::new(),
            requires_grad: false,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Gradient leaf keyed by a parameter id. Binding the same key twice
    /// returns the same leaf, so tied parameters share one gradient.
    pub fn param(&self, key: u64, value: &Tensor) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let v = self.var(value.clone());
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    pub fn param_grad(&self, key: u64) -> Option<Tensor> {
        let id = *self.params.borrow().get(&key)?;
        self.grad_by_id(id)
    }

    /// Queue a new value for a non-trainable buffer (batch-norm running
    /// statistics); applied by the owner after the step.
    pub fn stage(&self, key: u64, value: Tensor) {
        self.staged.borrow_mut().push((key, value));
    }

    pub fn take_staged(&self) -> Vec<(u64, Tensor)> {
        std::mem::take(&mut *self.staged.borrow_mut())
    }

    /// Record an op. Fails if the value contains NaN or infinity.
    pub fn push<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parent_ids.iter().any(|&p| nodes[p].requires_grad)
        };
        let id = self.push_node(Node {
            op,
            value,
            parents: parent_ids,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var { tape: self, id })
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_by_id(&self, id: usize) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(&id)?;
        let shape = self.nodes.borrow()[id].value.shape().to_vec();
        Tensor::new(&shape, g.clone()).ok()
    }

    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grad_by_id(v.id)
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Accumulate d(root)/d(leaf) into every gradient leaf.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                }
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                if pg.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(node.op));
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len(), "{}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}
