use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

type Backward<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Recording,
    Inference,
    Consumed,
}

/// Wengert list of recorded operations. Values are kept for the lifetime of
/// the tape; adjoint closures are dropped once `backward` has run.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    names: RefCell<BTreeMap<String, usize>>,
    state: Cell<State>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), names: RefCell::default(), state: Cell::new(State::Recording) }
    }

    /// A tape that evaluates forward values only.
    pub fn inference() -> Self {
        let t = Self::new();
        t.state.set(State::Inference);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.state.get() == State::Recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), false)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), true)
    }

    /// Differentiable leaf registered under `name`; repeated calls with the
    /// same name return the same variable.
    pub fn named_leaf(&self, name: &str, value: Rc<Tensor<T>>) -> Var<'_, T> {
        if let Some(&id) = self.names.borrow().get(name) {
            return Var { tape: self, id };
        }
        let v = self.push_leaf(value, true);
        self.names.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: requires_grad && self.is_recording(),
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an operation. `backward` maps the output adjoint to one
    /// optional adjoint per parent, in parent order.
    pub(crate) fn push<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.is_recording() && parents.iter().any(|&p| self.requires_grad(p));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: if requires_grad { parents.to_vec() } else { Vec::new() },
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: a second call
    /// is an error.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        match self.state.get() {
            State::Consumed => return Err(Error::Tape("tape already consumed by a backward pass".into())),
            State::Inference => return Err(Error::Tape("backward on an inference tape".into())),
            State::Recording => {}
        }
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Tape("loss belongs to a different tape".into()));
        }
        let loss_val = self.value(loss.id);
        if loss_val.len() != 1 {
            return Err(Error::Tape(format!("backward needs a scalar loss, got shape {:?}", loss_val.shape())));
        }
        self.state.set(State::Consumed);

        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_val.shape()));
        let mut leaves = BTreeMap::new();
        for id in (0..=loss.id).rev() {
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                if node.parents.is_empty() {
                    leaves.insert(id, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if node.parents.is_empty() {
                leaves.insert(id, g);
                continue;
            }
            let Some(bw) = node.backward.take() else { continue };
            let parents = node.parents.clone();
            let pgrads = bw(&g);
            debug_assert_eq!(pgrads.len(), parents.len());
            for (p, pg) in parents.into_iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        for (id, node) in nodes.iter().enumerate().skip(loss.id + 1) {
            if node.requires_grad && node.parents.is_empty() {
                leaves.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves, names: self.names.borrow().clone() })
    }
}

/// Leaf adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
    names: BTreeMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|id| self.leaves.get(id))
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .filter_map(|(n, id)| self.leaves.get(id).map(|g| (n.as_str(), g)))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn second_backward_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let y = x.mul(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::ones(&[3]));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().add(x).unwrap(); // x^2 + x
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 5.0);
    }

    #[test]
    fn inference_tape_records_nothing_differentiable() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.backward(y).is_err());
    }
}
