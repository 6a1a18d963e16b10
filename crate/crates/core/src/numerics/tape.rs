//! Explicit, single-use reverse-mode tape.
//!
//! Every differentiable operation appends one node holding its output value,
//! the handles of its inputs and a [`Backward`] rule. [`Tape::backward`]
//! walks the nodes in exact reverse execution order and accumulates
//! vector-Jacobian products additively, so a value consumed twice receives
//! the sum of both contributions.

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    /// Returns one entry per input: the gradient of the loss with respect to
    /// that input, or `None` when the input receives nothing.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

impl<T, F> Backward<T> for F
where
    T: Scalar,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        self(inputs, output, grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Leaf,
    Constant,
    Param(ParamId),
    Op,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    origin: Origin,
    requires_grad: bool,
    backward: Option<Box<dyn Backward<T>>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    first_non_finite: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            first_non_finite: None,
        }
    }

    /// A tape that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            first_non_finite: None,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Earliest node whose value contains NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.first_non_finite.map(Var)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, origin: Origin, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            origin,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input whose gradient can be read back from [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Origin::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Origin::Constant, false)
    }

    /// Binds a parameter; its gradient is accumulated by [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Origin::Param(id), true)
    }

    /// Constant copy of `var`: gradients stop here.
    pub fn detach(&mut self, var: Var) -> Var {
        let v = self.value(var).clone();
        self.constant(v)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Appends an operation output. When no input requires a gradient the
    /// backward rule is dropped and the node behaves as a constant.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Backward<T> + 'static,
    ) -> Var {
        let requires = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let var = self.push(value, Origin::Op, requires);
        if requires {
            let node = &mut self.nodes[var.0];
            node.inputs = inputs.to_vec();
            node.backward = Some(Box::new(backward));
        }
        var
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if let Some(i) = self.first_non_finite.filter(|&i| i <= loss.0) {
            return Err(Error::argument(format!("non-finite value at tape node {i}")));
        }
        if loss_node.value.len() != 1 {
            return Err(Error::argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if loss_node.requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.origin != Origin::Op {
                continue;
            }
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited.push(i);
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = rule.backward(&inputs, &node.value, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.origin {
                Origin::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            params,
            visited,
        })
    }

    /// Backward sweep that also accumulates into the bound parameters.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf or parameter node; `None` if it did not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every bound parameter into its store entry.
    /// Parameters that did not participate keep their current gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    /// Indices of the operation nodes whose backward rule ran, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
