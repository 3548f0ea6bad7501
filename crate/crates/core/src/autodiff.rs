//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]: the forward value, the ids
//! of the inputs and a closure mapping the output gradient to input
//! gradients. Node ids are assigned in creation order, so walking the tape
//! backwards from the loss is a valid topological order.
//!
//! ```
//! use cellsearch::autodiff::Tape;
//! use cellsearch::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Maps `(grad_out, inputs, output, needs)` to one optional gradient per input.
/// Entries whose `needs` flag is false may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        Var(nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape().clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient, `None` until a backward pass reaches the node.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.borrow()[v.0].clone()
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Records an operation result. Fails when the forward value is not finite.
    pub(crate) fn push(&self, op: &str, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {op}")));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        self.grads.borrow_mut().push(None);
        Ok(Var(nodes.len() - 1))
    }

    /// Accumulates `d loss / d node` into every node that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut upstream: Vec<Option<Tensor<T>>> = Vec::new();
        upstream.resize_with(loss.0 + 1, || None);
        upstream[loss.0] = Some(Tensor::full(root.value.dims().to_vec(), T::one())?);

        let mut grads = self.grads.borrow_mut();
        for id in (0..=loss.0).rev() {
            let Some(grad) = upstream[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = backward(&grad, &inputs, &node.value, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(g), true) = (g, need) else { continue };
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!("gradient flowing into node {p}")));
                    }
                    match &mut upstream[p] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&grad)?,
                slot => *slot = Some(grad),
            }
        }
        Ok(())
    }
}
