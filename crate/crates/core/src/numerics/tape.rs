//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Every op pushes its output
//! value together with a closure that maps the output gradient to input
//! gradients. Because parents always precede children, walking the list
//! backwards is a valid topological order.
//!
//! Ops whose inputs are all constants record no closure, so a tape built
//! only from constants is a plain forward evaluator.

use std::collections::HashMap;

use super::param::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct GradCtx<'a> {
    /// Gradient of the loss with respect to this op's output.
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    /// Which inputs need a gradient; closures may return `None` for the rest.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&GradCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter bindings keyed by the parameter's address, so a module that
    /// uses the same weight twice (tied parameters) gets a single leaf.
    bound: HashMap<usize, Var>,
    /// Bind every parameter as a constant (forward-only evaluation).
    inference: bool,
}

/// Result of [`Tape::backward`]: gradients for every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which parameters are bound as constants, so nothing is
    /// kept for a backward pass.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push("leaf", value, true)
    }

    /// Binds a parameter: trainable ones become leaves, frozen ones constants.
    /// Binding the same parameter twice returns the same node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let key = p as *const Parameter as usize;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = if p.requires_grad && !self.inference {
            self.leaf(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        self.bound.insert(key, v);
        v
    }

    /// Node bound to `p` on this tape, if it was used.
    pub fn param_var(&self, p: &Parameter) -> Option<Var> {
        self.bound.get(&(p as *const Parameter as usize)).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op. The output is checked for non-finite values, and the
    /// closure is dropped when no input needs a gradient.
    pub fn record<F>(&mut self, op: &'static str, inputs: &[Var], value: Tensor, backward: F) -> Result<Var>
    where
        F: Fn(&GradCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        value.check_finite(op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (parents, backward): (Vec<usize>, Option<BackwardFn>) = if requires_grad {
            (inputs.iter().map(|v| v.0).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            op,
            value,
            parents,
            backward,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a one-element `loss`. The tape is left untouched,
    /// so it can be inspected (or backpropagated again) afterwards.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: loss_value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let ctx = GradCtx {
                grad: &g,
                output: &node.value,
                inputs: &inputs,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, need), ig) in node.parents.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                if ig.shape() != self.nodes[p].value.shape() {
                    return Err(Error::Shape {
                        op: node.op,
                        lhs: ig.shape().to_vec(),
                        rhs: self.nodes[p].value.shape().to_vec(),
                    });
                }
                ig.check_finite(&format!("backward of {}", node.op))?;
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
