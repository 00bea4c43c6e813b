//! Reverse-mode differentiation graph.
//!
//! The graph is an eager tape: every operation computes its value as it is
//! recorded, so model code can inspect intermediate values (the attention
//! bias, sample validity) while building the graph. Backward walks nodes in
//! reverse insertion order, which is a topological order because parents
//! always precede children; gradient accumulation order is therefore fixed
//! and results are bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::grid::DenseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Context handed to backward rules: parent values and the node's own output.
pub struct OpCtx<'g, S> {
    pub inputs: Vec<&'g DenseGrid<S>>,
    pub output: &'g DenseGrid<S>,
}

/// Accumulation sink for backward rules. Rules add their contribution for
/// parent `pos` (position within the node's parent list) in place; parents
/// that do not require gradients are skipped transparently.
pub struct GradSink<'a, S: Scalar> {
    parents: &'a [NodeId],
    needs: &'a [bool],
    shapes: Vec<&'a [usize]>,
    grads: &'a mut [Option<DenseGrid<S>>],
}

impl<'a, S: Scalar> GradSink<'a, S> {
    /// Accumulate into the gradient buffer of parent `pos`. The closure
    /// receives a zero-initialized (or previously accumulated) grid of the
    /// parent's shape and must add, never overwrite.
    pub fn add_to(&mut self, pos: usize, f: impl FnOnce(&mut DenseGrid<S>)) {
        if !self.needs[pos] {
            return;
        }
        let idx = self.parents[pos].0;
        let slot = &mut self.grads[idx];
        if slot.is_none() {
            *slot = Some(DenseGrid::zeros(self.shapes[pos].to_vec()));
        }
        f(slot.as_mut().expect("just initialized"));
    }

    /// Whether parent `pos` participates in gradient flow at all. Rules may
    /// use this to skip expensive work.
    pub fn needs(&self, pos: usize) -> bool {
        self.needs[pos]
    }
}

pub trait BackwardRule<S: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &OpCtx<'_, S>, grad_out: &DenseGrid<S>, sink: &mut GradSink<'_, S>);
}

pub(crate) struct Node<S: Scalar> {
    pub value: DenseGrid<S>,
    pub parents: Vec<NodeId>,
    pub rule: Option<Box<dyn BackwardRule<S>>>,
    pub requires_grad: bool,
    pub detached: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant; no gradient flows into it.
    pub fn constant(&mut self, value: DenseGrid<S>) -> NodeId {
        self.push(Node { value, parents: vec![], rule: None, requires_grad: false, detached: false })
    }

    pub fn scalar(&mut self, v: S) -> NodeId {
        self.constant(DenseGrid::scalar(v))
    }

    /// Record a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: DenseGrid<S>) -> NodeId {
        self.push(Node { value, parents: vec![], rule: None, requires_grad: true, detached: false })
    }

    /// Forward-copies `x` and severs it from the graph: backward contributes
    /// nothing to anything upstream of a detached node.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        self.push(Node { value, parents: vec![], rule: None, requires_grad: false, detached: true })
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &DenseGrid<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_detached(&self, id: NodeId) -> bool {
        self.nodes[id.0].detached
    }

    /// Record an operation with a custom backward rule. The value must already
    /// be computed; `parents` lists every differentiable input in rule order.
    pub fn custom(
        &mut self,
        parents: Vec<NodeId>,
        value: DenseGrid<S>,
        rule: Box<dyn BackwardRule<S>>,
    ) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node { value, parents, rule: Some(rule), requires_grad, detached: false })
    }

    pub(crate) fn push(&mut self, node: Node<S>) -> NodeId {
        debug_assert!(
            node.value.is_finite_all(),
            "non-finite value out of {}",
            node.rule.as_ref().map(|r| r.name()).unwrap_or("leaf")
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(node);
        id
    }

    /// Reverse-mode sweep from a scalar loss. Returns the full gradient table
    /// indexed by node id; only nodes with `requires_grad` receive entries.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Err(Error::Numerical("loss does not depend on any differentiable leaf".into()));
        }
        let mut grads: Vec<Option<DenseGrid<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseGrid::full(loss_node.value.shape().to_vec(), S::one()));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let node = &self.nodes[idx];
            let rule = match &node.rule {
                Some(r) => r,
                None => continue,
            };
            let grad_out = grads[idx].take().expect("checked above");
            let ctx = OpCtx {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let shapes: Vec<&[usize]> = node.parents.iter().map(|p| self.nodes[p.0].value.shape()).collect();
            let mut sink = GradSink { parents: &node.parents, needs: &needs, shapes, grads: &mut grads };
            rule.backward(&ctx, &grad_out, &mut sink);
            // Intermediate gradients are dropped once consumed; leaves keep theirs.
            grads[idx] = if node.parents.is_empty() { Some(grad_out) } else { None };
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<DenseGrid<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn grad(&self, id: NodeId) -> Option<&DenseGrid<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<DenseGrid<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
