//! Static computation graphs with reverse-mode gradients.
//!
//! A [`Graph`] is built once from named inputs, named parameter leaves and
//! operator nodes. Construction order is the evaluation order, so the node
//! list is always topologically sorted. Parameters are not owned by the graph:
//! every call to [`Graph::forward`] borrows a [`ParamSet`], which lets several
//! graphs share one parameter pool and keeps `forward` free of side effects.

use std::any::Any;
use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Result, SubstrateError};
use crate::tensor::Tensor;

/// Named parameter tensors. Ordered so that iteration is reproducible.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Named input tensors bound for one evaluation.
pub type Feed = HashMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

type Cache = Box<dyn Any + Send + Sync>;

/// Per-node scratch space handed to [`Operator::forward`].
pub struct OpContext {
    pub mode: Mode,
    cache: Option<Cache>,
    updates: Vec<(usize, Tensor)>,
}

impl OpContext {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            cache: None,
            updates: Vec::new(),
        }
    }

    /// Stores intermediate values that `backward` can read back.
    pub fn save<T: Any + Send + Sync>(&mut self, value: T) {
        self.cache = Some(Box::new(value));
    }

    /// Requests that the parameter bound to input `slot` be replaced after
    /// this evaluation (used for running statistics).
    pub fn update_input(&mut self, slot: usize, value: Tensor) {
        self.updates.push((slot, value));
    }

    /// Removes the saved cache, for callers that drive an operator directly.
    pub fn take_cache(&mut self) -> Option<Box<dyn Any + Send + Sync>> {
        self.cache.take()
    }
}

/// A differentiable operator.
///
/// `output_shape` is the shape rule checked both at construction and at every
/// forward call. `backward` returns one optional gradient per input; `None`
/// marks an input the operator does not differentiate (indices, statistics).
pub trait Operator: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn output_shape(&self, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String>;

    fn forward(&self, inputs: &[&Tensor], ctx: &mut OpContext) -> Tensor;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        cache: Option<&(dyn Any + Send + Sync)>,
    ) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum NodeKind {
    Input(String),
    Param(String),
    Op {
        op: Box<dyn Operator>,
        inputs: Vec<NodeId>,
    },
}

#[derive(Debug)]
struct Node {
    label: String,
    kind: NodeKind,
    shape: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Declares an input. The shape is used for construction-time checks; the
    /// leading dimension may differ at evaluation time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(name.to_string(), NodeKind::Input(name.to_string()), shape.to_vec())
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(name.to_string(), NodeKind::Param(name.to_string()), shape.to_vec())
    }

    pub fn apply(&mut self, op: impl Operator + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        let label = format!("{}#{}", op.name(), self.nodes.len());
        self.apply_labeled(&label, op, inputs)
    }

    pub fn apply_labeled(
        &mut self,
        label: &str,
        op: impl Operator + 'static,
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(SubstrateError::Contract(format!(
                    "node `{label}` refers to unknown node {}",
                    id.0
                )));
            }
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|id| &self.nodes[id.0].shape[..]).collect();
        let shape = op.output_shape(&shapes).map_err(|detail| SubstrateError::Shape {
            node: label.to_string(),
            detail,
        })?;
        Ok(self.push(
            label.to_string(),
            NodeKind::Op {
                op: Box::new(op),
                inputs: inputs.to_vec(),
            },
            shape,
        ))
    }

    fn push(&mut self, label: String, kind: NodeKind, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { label, kind, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    /// Shape inferred at construction time.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].kind {
            NodeKind::Op { op, .. } => Some(op.name()),
            _ => None,
        }
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        match &self.nodes[id.0].kind {
            NodeKind::Op { inputs, .. } => inputs,
            _ => &[],
        }
    }

    /// `(label, operator name)` of every operator node, in construction order.
    pub fn op_nodes(&self) -> Vec<(&str, &str)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Op { op, .. } => Some((n.label.as_str(), op.name())),
                _ => None,
            })
            .collect()
    }

    /// Names of all parameter leaves, in construction order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node in construction order.
    pub fn forward<'a>(&self, params: &'a ParamSet, feed: &'a Feed, mode: Mode) -> Result<Evaluation<'a>> {
        self.evaluate(params, feed, mode, self.nodes.len())
    }

    /// Evaluates nodes up to and including `last`. Inputs declared after
    /// `last` need not be bound. The result cannot be used for `backward`.
    pub fn forward_until<'a>(
        &self,
        params: &'a ParamSet,
        feed: &'a Feed,
        mode: Mode,
        last: NodeId,
    ) -> Result<Evaluation<'a>> {
        self.evaluate(params, feed, mode, (last.0 + 1).min(self.nodes.len()))
    }

    fn evaluate<'a>(&self, params: &'a ParamSet, feed: &'a Feed, mode: Mode, count: usize) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(count);
        let mut caches: Vec<Option<Cache>> = Vec::with_capacity(count);
        let mut updates = Vec::new();
        for node in &self.nodes[..count] {
            match &node.kind {
                NodeKind::Input(name) => {
                    let t = feed
                        .get(name)
                        .ok_or_else(|| SubstrateError::UnboundInput(name.clone()))?;
                    if t.rank() != node.shape.len() || t.shape()[1..] != node.shape[1..] {
                        return Err(SubstrateError::Shape {
                            node: node.label.clone(),
                            detail: format!("expected {:?}, bound {:?}", node.shape, t.shape()),
                        });
                    }
                    values.push(Cow::Borrowed(t));
                    caches.push(None);
                }
                NodeKind::Param(name) => {
                    let t = params
                        .get(name)
                        .ok_or_else(|| SubstrateError::MissingParam(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(SubstrateError::Shape {
                            node: node.label.clone(),
                            detail: format!("expected {:?}, bound {:?}", node.shape, t.shape()),
                        });
                    }
                    values.push(Cow::Borrowed(t));
                    caches.push(None);
                }
                NodeKind::Op { op, inputs } => {
                    let args: Vec<&Tensor> = inputs.iter().map(|id| values[id.0].as_ref()).collect();
                    let shapes: Vec<&[usize]> = args.iter().map(|t| t.shape()).collect();
                    let expected = op.output_shape(&shapes).map_err(|detail| SubstrateError::Shape {
                        node: node.label.clone(),
                        detail,
                    })?;
                    let mut ctx = OpContext::new(mode);
                    let out = op.forward(&args, &mut ctx);
                    debug_assert_eq!(out.shape(), expected.as_slice(), "{}", node.label);
                    if !out.is_finite() {
                        return Err(SubstrateError::Numeric {
                            node: node.label.clone(),
                        });
                    }
                    for (slot, value) in ctx.updates {
                        if let NodeKind::Param(name) = &self.nodes[inputs[slot].0].kind {
                            updates.push((name.clone(), value));
                        }
                    }
                    values.push(Cow::Owned(out));
                    caches.push(ctx.cache);
                }
            }
        }
        Ok(Evaluation {
            values,
            caches,
            updates,
        })
    }

    /// Reverse-mode gradients of the scalar node `loss`.
    pub fn backward(&self, eval: &Evaluation<'_>, loss: NodeId) -> Result<Gradients> {
        if eval.values.len() != self.nodes.len() {
            return Err(SubstrateError::Contract(
                "evaluation does not belong to this graph".into(),
            ));
        }
        if eval.values[loss.0].len() != 1 {
            return Err(SubstrateError::Contract(format!(
                "loss node `{}` is not scalar (shape {:?})",
                self.nodes[loss.0].label,
                eval.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(eval.values[loss.0].shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            if let NodeKind::Op { op, inputs } = &self.nodes[idx].kind {
                let args: Vec<&Tensor> = inputs.iter().map(|id| eval.values[id.0].as_ref()).collect();
                let cache = eval.caches[idx].as_deref();
                let input_grads = op.backward(&args, &eval.values[idx], &grad, cache);
                for (id, g) in inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    match &mut grads[id.0] {
                        Some(acc) => acc.axpy(1.0, &g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Param(name) = &node.kind {
                if !eval.values[i].requires_grad {
                    continue;
                }
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(eval.values[i].shape()));
                match params.get_mut(name) {
                    Some(acc) => Tensor::axpy(acc, 1.0, &g),
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Node values from one forward pass.
pub struct Evaluation<'a> {
    values: Vec<Cow<'a, Tensor>>,
    caches: Vec<Option<Cache>>,
    updates: Vec<(String, Tensor)>,
}

impl Evaluation<'_> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Parameter replacements requested by stateful operators (running
    /// statistics). Empty in [`Mode::Eval`].
    pub fn updates(&self) -> &[(String, Tensor)] {
        &self.updates
    }

    pub fn into_updates(self) -> Vec<(String, Tensor)> {
        self.updates
    }
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a trainable parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to any node; `None` if the loss does not depend on it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }
}
