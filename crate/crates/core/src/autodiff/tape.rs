use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::param::{ParamId, Parameter};
use crate::tensor::{Scalar, Tensor};

/// Maps the output gradient to one optional gradient per parent; `needs[i]` tells
/// whether parent `i` wants one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward pass. Confined to a single thread.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
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

    /// Drops every recorded node. Outstanding `Var`s must not be used afterwards.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false, None)
    }

    /// Records the current value of a parameter. Gradients are produced for it only
    /// when it is trainable.
    pub fn param(&self, p: &Parameter<T>) -> Var<'_, T> {
        self.push_leaf(p.value.clone(), p.trainable, Some(p.id()))
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: BackwardFn<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every trainable
    /// parameter the loss depends on.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Backward("tape is empty"));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                out.accumulate(pid, g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            by_param: HashMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        match self.by_param.get_mut(&id) {
            Some(acc) => acc.add_assign(&g).expect("parameter gradient shape is fixed"),
            None => {
                self.by_param.insert(id, g);
            }
        }
    }

    pub fn get(&self, p: &Parameter<T>) -> Option<&Tensor<T>> {
        self.by_param.get(&p.id())
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }
}
