//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and, when any
//! parent needs a gradient, a vector-Jacobian product closure. `backward`
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because parents always precede their children.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{Param, ParamId};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a vector-Jacobian product.
pub struct VjpCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
}

impl<'a> VjpCtx<'a> {
    pub fn input(&self, i: usize) -> &'a Tensor {
        self.inputs[i]
    }

    /// Whether parent `i` wants a gradient; ops may skip the work otherwise.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type VjpResult = Result<Vec<Option<Tensor>>>;
type VjpFn = Box<dyn Fn(&VjpCtx<'_>) -> VjpResult>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<Var>,
    vjp: Option<VjpFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && !self.no_grad;
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            vjp: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_leaf("input", t, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf("constant", t, false)
    }

    /// Binds a parameter. Binding the same parameter twice yields the same node,
    /// so weights shared across iterations accumulate into one gradient.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push_leaf("param", p.value().clone(), true);
        self.params.insert(p.id(), v);
        v
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push_leaf("detach", t, false)
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Appends an op node. Fails if the forward value contains NaN or infinity.
    pub fn record<F>(&mut self, op: &'static str, value: Tensor, parents: &[Var], vjp: F) -> Result<Var>
    where
        F: Fn(&VjpCtx<'_>) -> VjpResult + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = !self.no_grad && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            vjp: if requires_grad { Some(Box::new(vjp)) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(vjp) = node.vjp.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = VjpCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = vjp(&ctx)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if pg.shape() != self.nodes[p.0].value.shape() {
                    return Err(Error::shape(
                        node.op,
                        format!(
                            "adjoint shape {:?} for parent of shape {:?}",
                            pg.shape(),
                            self.nodes[p.0].value.shape()
                        ),
                    ));
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite { op: node.op });
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(grad);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones([2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn record_rejects_nan() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones([1]));
        let err = g
            .record("bad", Tensor::scalar(f64::NAN), &[x], |_| Ok(vec![None]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "bad" }));
    }

    #[test]
    fn shared_param_binds_once() {
        let p = Param::new(Tensor::ones([3]));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
    }

    #[test]
    fn inference_graph_records_no_closures() {
        let mut g = Graph::inference();
        let x = g.input(Tensor::ones([1]).with_requires_grad(true));
        assert!(!g.requires_grad(x));
    }
}
