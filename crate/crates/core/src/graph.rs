//! Layer graph with named parameters and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of [`LayerNode`]s; every node may only
//! consume nodes added before it, so node order is a topological order and
//! the graph is acyclic by construction. Convolution nodes reference a
//! parameter entry by key. Keys are normally the node id; the final
//! reconstruction conv is the one layer applied to several branches and
//! shares its key across them.

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ops;
use crate::tensor::{ConvSpec, Dims, Real, Tensor4, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Input,
    Conv { spec: ConvSpec, param: String },
    Relu,
    /// Sum of two or more inputs of identical shape.
    Add,
    Concat,
    SplitUpper,
    SplitLower,
    PixelShuffle(usize),
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::Relu => "relu",
            NodeKind::Add => "add",
            NodeKind::Concat => "concat",
            NodeKind::SplitUpper => "split_upper",
            NodeKind::SplitLower => "split_lower",
            NodeKind::PixelShuffle(_) => "pixel_shuffle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNode {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    /// Index of the network layer this conv belongs to when counting depth;
    /// parallel convs at the same depth share an index.
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOutput {
    pub scale: u32,
    pub node: NodeId,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node `{id}`: {source}")]
    Node {
        id: String,
        #[source]
        source: TensorError,
    },
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{id}` references unresolved input {input}")]
    UnresolvedInput { id: String, input: NodeId },
    #[error("node `{id}` of kind {kind} expects {expected} inputs, got {actual}")]
    Arity {
        id: String,
        kind: &'static str,
        expected: &'static str,
        actual: usize,
    },
    #[error("parameter `{param}` is shared by convs with different shapes")]
    SharedParamMismatch { param: String },
    #[error("graph has no outputs")]
    NoOutputs,
    #[error("graph has two outputs for scale {0}")]
    DuplicateOutput(u32),
    #[error("no output for scale {0}")]
    UnknownScale(u32),
    #[error("missing parameter entry `{0}`")]
    MissingParameter(String),
    #[error("parameter `{param}`: stored weights {stored} do not match conv weights {expected}")]
    ParameterShape {
        param: String,
        stored: Dims,
        expected: Dims,
    },
    #[error("internal error: trace holds no value for node `{0}`")]
    MissingTrace(String),
    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),
}

fn node_err(id: &str) -> impl FnOnce(TensorError) -> GraphError + '_ {
    move |source| GraphError::Node {
        id: id.to_string(),
        source,
    }
}

/// Incrementally assembles a [`Graph`].
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    ids: HashSet<String>,
    outputs: Vec<GraphOutput>,
    ingress_channels: usize,
    first_error: Option<GraphError>,
}

impl GraphBuilder {
    /// Starts a graph whose ingress node (id `input`) carries `ingress_channels`.
    pub fn new(ingress_channels: usize) -> (Self, NodeId) {
        let mut b = Self {
            nodes: Vec::new(),
            ids: HashSet::new(),
            outputs: Vec::new(),
            ingress_channels,
            first_error: None,
        };
        let input = b.push("input", NodeKind::Input, vec![], None);
        (b, input)
    }

    fn push(&mut self, id: &str, kind: NodeKind, inputs: Vec<NodeId>, layer: Option<usize>) -> NodeId {
        if !self.ids.insert(id.to_string()) && self.first_error.is_none() {
            self.first_error = Some(GraphError::DuplicateId(id.to_string()));
        }
        let next = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= next) {
            if self.first_error.is_none() {
                self.first_error = Some(GraphError::UnresolvedInput {
                    id: id.to_string(),
                    input: bad,
                });
            }
        }
        self.nodes.push(LayerNode {
            id: id.to_string(),
            kind,
            inputs,
            layer,
        });
        next
    }

    pub fn conv(&mut self, id: &str, input: NodeId, spec: ConvSpec, layer: usize) -> NodeId {
        self.conv_shared(id, id, input, spec, layer)
    }

    /// Conv whose parameters live under `param`, possibly shared with other nodes.
    pub fn conv_shared(&mut self, id: &str, param: &str, input: NodeId, spec: ConvSpec, layer: usize) -> NodeId {
        let kind = NodeKind::Conv {
            spec,
            param: param.to_string(),
        };
        self.push(id, kind, vec![input], Some(layer))
    }

    pub fn relu(&mut self, id: &str, input: NodeId) -> NodeId {
        self.push(id, NodeKind::Relu, vec![input], None)
    }

    /// Conv followed by ReLU; the ReLU node gets id `{id}.relu`.
    pub fn conv_relu(&mut self, id: &str, input: NodeId, spec: ConvSpec, layer: usize) -> NodeId {
        let c = self.conv(id, input, spec, layer);
        self.relu(&format!("{id}.relu"), c)
    }

    pub fn add(&mut self, id: &str, inputs: &[NodeId]) -> NodeId {
        self.push(id, NodeKind::Add, inputs.to_vec(), None)
    }

    pub fn concat(&mut self, id: &str, a: NodeId, b: NodeId) -> NodeId {
        self.push(id, NodeKind::Concat, vec![a, b], None)
    }

    pub fn split_upper(&mut self, id: &str, input: NodeId) -> NodeId {
        self.push(id, NodeKind::SplitUpper, vec![input], None)
    }

    pub fn split_lower(&mut self, id: &str, input: NodeId) -> NodeId {
        self.push(id, NodeKind::SplitLower, vec![input], None)
    }

    pub fn pixel_shuffle(&mut self, id: &str, input: NodeId, r: usize) -> NodeId {
        self.push(id, NodeKind::PixelShuffle(r), vec![input], None)
    }

    pub fn output(&mut self, scale: u32, node: NodeId) {
        self.outputs.push(GraphOutput { scale, node });
    }

    pub fn finish(self) -> Result<Graph, GraphError> {
        if let Some(err) = self.first_error {
            return Err(err);
        }
        if self.outputs.is_empty() {
            return Err(GraphError::NoOutputs);
        }
        let mut seen = HashSet::new();
        for o in &self.outputs {
            if !seen.insert(o.scale) {
                return Err(GraphError::DuplicateOutput(o.scale));
            }
        }
        let graph = Graph {
            nodes: self.nodes,
            outputs: self.outputs,
            ingress_channels: self.ingress_channels,
        };
        graph.check_structure()?;
        Ok(graph)
    }
}

/// Immutable layer graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    nodes: Vec<LayerNode>,
    outputs: Vec<GraphOutput>,
    ingress_channels: usize,
}

impl Graph {
    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn find(&self, id: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn outputs(&self) -> &[GraphOutput] {
        &self.outputs
    }

    pub fn scales(&self) -> Vec<u32> {
        self.outputs.iter().map(|o| o.scale).collect()
    }

    pub fn ingress_channels(&self) -> usize {
        self.ingress_channels
    }

    /// Number of edges (input references) across all nodes.
    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.inputs.len()).sum()
    }

    /// Ids of the nodes consuming `node`.
    pub fn consumers(&self, node: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&node))
            .map(|(i, _)| i)
            .collect()
    }

    /// Conv nodes in graph order.
    pub fn convs(&self) -> impl Iterator<Item = (NodeId, &LayerNode, &ConvSpec, &str)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.kind {
            NodeKind::Conv { spec, param } => Some((i, n, spec, param.as_str())),
            _ => None,
        })
    }

    /// Unique parameter keys with their conv geometry, in first-use order.
    pub fn param_specs(&self) -> IndexMap<String, ConvSpec> {
        let mut specs = IndexMap::new();
        for (_, _, spec, param) in self.convs() {
            specs.entry(param.to_string()).or_insert(*spec);
        }
        specs
    }

    /// Distinct layer indices among convs: the network's depth in layers.
    pub fn layer_count(&self) -> usize {
        let layers: HashSet<usize> = self.nodes.iter().filter_map(|n| n.layer).collect();
        layers.len()
    }

    fn check_structure(&self) -> Result<(), GraphError> {
        let mut shared: IndexMap<&str, &ConvSpec> = IndexMap::new();
        for node in &self.nodes {
            let (expected, ok) = match node.kind {
                NodeKind::Input => ("0", node.inputs.is_empty()),
                NodeKind::Add => ("at least 2", node.inputs.len() >= 2),
                NodeKind::Concat => ("2", node.inputs.len() == 2),
                _ => ("1", node.inputs.len() == 1),
            };
            if !ok {
                return Err(GraphError::Arity {
                    id: node.id.clone(),
                    kind: node.kind.name(),
                    expected,
                    actual: node.inputs.len(),
                });
            }
            if let NodeKind::Conv { spec, param } = &node.kind {
                if let Some(prev) = shared.insert(param, spec) {
                    if prev != spec {
                        return Err(GraphError::SharedParamMismatch { param: param.clone() });
                    }
                }
            }
        }
        self.infer_dims(Dims::new(1, self.ingress_channels, 1, 1)).map(|_| ())
    }

    /// Propagates tensor dims from the ingress through every node.
    pub fn infer_dims(&self, input: Dims) -> Result<Vec<Dims>, GraphError> {
        let mut dims: Vec<Dims> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Dims> = node.inputs.iter().map(|&i| dims[i]).collect();
            let err = node_err(&node.id);
            let d = match &node.kind {
                NodeKind::Input => {
                    if input.c != self.ingress_channels {
                        return Err(err(TensorError::ShapeMismatch {
                            op: "ingress",
                            axis: crate::tensor::Axis::Channel,
                            expected: self.ingress_channels,
                            actual: input.c,
                        }));
                    }
                    input
                }
                NodeKind::Conv { spec, .. } => {
                    let d = ins[0];
                    if d.c != spec.in_channels {
                        return Err(err(TensorError::ShapeMismatch {
                            op: "conv",
                            axis: crate::tensor::Axis::Channel,
                            expected: spec.in_channels,
                            actual: d.c,
                        }));
                    }
                    Dims { c: spec.out_channels, ..d }
                }
                NodeKind::Relu => ins[0],
                NodeKind::Add => {
                    for other in &ins[1..] {
                        ins[0].expect_eq(other, "add").map_err(node_err(&node.id))?;
                    }
                    ins[0]
                }
                NodeKind::Concat => {
                    Dims { c: 0, ..ins[0] }
                        .expect_eq(&Dims { c: 0, ..ins[1] }, "concat")
                        .map_err(err)?;
                    Dims {
                        c: ins[0].c + ins[1].c,
                        ..ins[0]
                    }
                }
                NodeKind::SplitUpper | NodeKind::SplitLower => {
                    if !ins[0].c.is_multiple_of(2) {
                        return Err(err(TensorError::Config {
                            op: "split_channels",
                            reason: format!("odd channel count {}", ins[0].c),
                        }));
                    }
                    Dims { c: ins[0].c / 2, ..ins[0] }
                }
                NodeKind::PixelShuffle(r) => {
                    let r = *r;
                    if r == 0 || !ins[0].c.is_multiple_of(r * r) {
                        return Err(err(TensorError::Config {
                            op: "pixel_shuffle",
                            reason: format!("{} channels not divisible by r^2 for r = {r}", ins[0].c),
                        }));
                    }
                    Dims::new(ins[0].n, ins[0].c / (r * r), ins[0].h * r, ins[0].w * r)
                }
            };
            dims.push(d);
        }
        Ok(dims)
    }

    fn output_index(&self, scale: u32) -> Result<usize, GraphError> {
        self.outputs
            .iter()
            .position(|o| o.scale == scale)
            .ok_or(GraphError::UnknownScale(scale))
    }

    /// Mask of the nodes evaluated when only the `scale` branch is requested.
    pub fn branch_mask(&self, scale: u32) -> Result<Vec<bool>, GraphError> {
        Ok(self.required(&[self.output_index(scale)?]))
    }

    /// Nodes required to compute the selected outputs.
    fn required(&self, selected: &[usize]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for &o in selected {
            need[self.outputs[o].node] = true;
        }
        for idx in (0..self.nodes.len()).rev() {
            if need[idx] {
                for &i in &self.nodes[idx].inputs {
                    need[i] = true;
                }
            }
        }
        need
    }

    /// Evaluates every output.
    pub fn forward<T: Real>(&self, store: &ParameterStore<T>, input: &Tensor4<T>) -> Result<Trace<T>, GraphError> {
        let all: Vec<usize> = (0..self.outputs.len()).collect();
        self.forward_selected(store, input, &all)
    }

    /// Evaluates only the branch producing `scale`.
    pub fn forward_scale<T: Real>(
        &self,
        store: &ParameterStore<T>,
        input: &Tensor4<T>,
        scale: u32,
    ) -> Result<Trace<T>, GraphError> {
        let idx = self.output_index(scale)?;
        self.forward_selected(store, input, &[idx])
    }

    fn forward_selected<T: Real>(
        &self,
        store: &ParameterStore<T>,
        input: &Tensor4<T>,
        selected: &[usize],
    ) -> Result<Trace<T>, GraphError> {
        let need = self.required(selected);
        let mut values: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        let mut evaluations = vec![0u32; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if !need[idx] {
                continue;
            }
            let arg = |k: usize| -> Result<&Tensor4<T>, GraphError> {
                values[node.inputs[k]]
                    .as_ref()
                    .ok_or_else(|| GraphError::MissingTrace(self.nodes[node.inputs[k]].id.clone()))
            };
            let err = node_err(&node.id);
            let out = match &node.kind {
                NodeKind::Input => {
                    if input.dims().c != self.ingress_channels {
                        return Err(err(TensorError::ShapeMismatch {
                            op: "ingress",
                            axis: crate::tensor::Axis::Channel,
                            expected: self.ingress_channels,
                            actual: input.dims().c,
                        }));
                    }
                    input.clone()
                }
                NodeKind::Conv { spec, param } => {
                    let slot = store.get(param).ok_or_else(|| GraphError::MissingParameter(param.clone()))?;
                    ops::conv2d_forward(arg(0)?, &slot.weights, &slot.bias, spec).map_err(err)?
                }
                NodeKind::Relu => ops::relu_forward(arg(0)?),
                NodeKind::Add => {
                    let mut acc = arg(0)?.clone();
                    for k in 1..node.inputs.len() {
                        acc.add_assign(arg(k)?).map_err(node_err(&node.id))?;
                    }
                    acc
                }
                NodeKind::Concat => ops::concat_channels(arg(0)?, arg(1)?).map_err(err)?,
                NodeKind::SplitUpper => ops::split_channels(arg(0)?).map_err(err)?.0,
                NodeKind::SplitLower => ops::split_channels(arg(0)?).map_err(err)?.1,
                NodeKind::PixelShuffle(r) => ops::pixel_shuffle(arg(0)?, *r).map_err(err)?,
            };
            values[idx] = Some(out);
            evaluations[idx] += 1;
        }
        Ok(Trace {
            values,
            evaluations,
            selected: selected.iter().map(|&o| self.outputs[o]).collect(),
        })
    }

    /// Cotangent contributions of `node` to each of its inputs, plus the
    /// parameter gradients when `node` is a conv.
    pub(crate) fn node_vjp<T: Real>(
        &self,
        node: NodeId,
        store: &ParameterStore<T>,
        trace: &Trace<T>,
        cot: &Tensor4<T>,
    ) -> Result<NodeVjp<T>, GraphError> {
        let n = &self.nodes[node];
        let arg = |k: usize| -> Result<&Tensor4<T>, GraphError> {
            trace
                .value(n.inputs[k])
                .ok_or_else(|| GraphError::MissingTrace(self.nodes[n.inputs[k]].id.clone()))
        };
        let err = node_err(&n.id);
        let mut out = NodeVjp {
            inputs: Vec::new(),
            params: None,
        };
        match &n.kind {
            NodeKind::Input => {}
            NodeKind::Conv { spec, param } => {
                let slot = store.get(param).ok_or_else(|| GraphError::MissingParameter(param.clone()))?;
                let g = ops::conv2d_backward(arg(0)?, &slot.weights, cot, spec).map_err(err)?;
                out.inputs.push(Contribution {
                    slot: 0,
                    channel_offset: 0,
                    tensor: g.input,
                });
                out.params = Some((param.clone(), g.weights, g.bias));
            }
            NodeKind::Relu => {
                let g = ops::relu_backward(arg(0)?, cot).map_err(err)?;
                out.inputs.push(Contribution {
                    slot: 0,
                    channel_offset: 0,
                    tensor: g,
                });
            }
            NodeKind::Add => {
                for slot in 0..n.inputs.len() {
                    out.inputs.push(Contribution {
                        slot,
                        channel_offset: 0,
                        tensor: cot.clone(),
                    });
                }
            }
            NodeKind::Concat => {
                let ca = arg(0)?.dims().c;
                let cb = arg(1)?.dims().c;
                out.inputs.push(Contribution {
                    slot: 0,
                    channel_offset: 0,
                    tensor: ops::slice_channels(cot, 0, ca),
                });
                out.inputs.push(Contribution {
                    slot: 1,
                    channel_offset: 0,
                    tensor: ops::slice_channels(cot, ca, cb),
                });
            }
            NodeKind::SplitUpper => out.inputs.push(Contribution {
                slot: 0,
                channel_offset: 0,
                tensor: cot.clone(),
            }),
            NodeKind::SplitLower => out.inputs.push(Contribution {
                slot: 0,
                channel_offset: arg(0)?.dims().c / 2,
                tensor: cot.clone(),
            }),
            NodeKind::PixelShuffle(r) => out.inputs.push(Contribution {
                slot: 0,
                channel_offset: 0,
                tensor: ops::pixel_unshuffle(cot, *r).map_err(err)?,
            }),
        }
        Ok(out)
    }

    /// Reverse sweep from the given output cotangents.
    ///
    /// Every gradient slot in `store` is overwritten: parameters outside the
    /// traced branches end with exactly zero gradient. Nodes consumed by
    /// several others receive the sum of the incoming cotangents.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        trace: &Trace<T>,
        grad_outputs: &[(u32, Tensor4<T>)],
    ) -> Result<Cotangents<T>, GraphError> {
        store.zero_grads();
        let mut cots: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        for (scale, g) in grad_outputs {
            let node = self.outputs[self.output_index(*scale)?].node;
            let value = trace.value(node).ok_or_else(|| GraphError::MissingTrace(self.nodes[node].id.clone()))?;
            value.dims().expect_eq(&g.dims(), "backward").map_err(node_err(&self.nodes[node].id))?;
            accumulate(&mut cots[node], g.clone(), 0, value.dims()).map_err(node_err(&self.nodes[node].id))?;
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(cot) = cots[idx].take() else { continue };
            if trace.value(idx).is_none() {
                return Err(GraphError::MissingTrace(self.nodes[idx].id.clone()));
            }
            let vjp = self.node_vjp(idx, store, trace, &cot)?;
            for c in vjp.inputs {
                let target = self.nodes[idx].inputs[c.slot];
                let dims = trace
                    .value(target)
                    .ok_or_else(|| GraphError::MissingTrace(self.nodes[target].id.clone()))?
                    .dims();
                accumulate(&mut cots[target], c.tensor, c.channel_offset, dims)
                    .map_err(node_err(&self.nodes[idx].id))?;
            }
            if let Some((param, gw, gb)) = vjp.params {
                let slot = store
                    .get_mut(&param)
                    .ok_or_else(|| GraphError::MissingParameter(param.clone()))?;
                slot.grad_weights.add_assign(&gw).map_err(node_err(&self.nodes[idx].id))?;
                for (a, b) in slot.grad_bias.iter_mut().zip(gb) {
                    *a = *a + b;
                }
            }
            cots[idx] = Some(cot);
        }
        Ok(Cotangents { values: cots })
    }
}

fn accumulate<T: Real>(
    slot: &mut Option<Tensor4<T>>,
    tensor: Tensor4<T>,
    channel_offset: usize,
    dims: Dims,
) -> Result<(), TensorError> {
    match slot {
        None if channel_offset == 0 && tensor.dims() == dims => {
            *slot = Some(tensor);
            Ok(())
        }
        None => {
            let mut acc = Tensor4::zeros(dims);
            ops::add_into_channels(&mut acc, &tensor, channel_offset)?;
            *slot = Some(acc);
            Ok(())
        }
        Some(acc) => ops::add_into_channels(acc, &tensor, channel_offset),
    }
}

pub(crate) struct Contribution<T> {
    pub slot: usize,
    pub channel_offset: usize,
    pub tensor: Tensor4<T>,
}

pub(crate) struct NodeVjp<T> {
    pub inputs: Vec<Contribution<T>>,
    pub params: Option<(String, Tensor4<T>, Vec<T>)>,
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    values: Vec<Option<Tensor4<T>>>,
    evaluations: Vec<u32>,
    selected: Vec<GraphOutput>,
}

impl<T: Real> Trace<T> {
    pub fn value(&self, node: NodeId) -> Option<&Tensor4<T>> {
        self.values.get(node).and_then(|v| v.as_ref())
    }

    /// Output tensor for `scale`, if that branch was evaluated.
    pub fn output(&self, scale: u32) -> Option<&Tensor4<T>> {
        self.selected
            .iter()
            .find(|o| o.scale == scale)
            .and_then(|o| self.value(o.node))
    }

    /// `(scale, output)` for every evaluated branch.
    pub fn outputs(&self) -> Vec<(u32, &Tensor4<T>)> {
        self.selected
            .iter()
            .filter_map(|o| self.value(o.node).map(|v| (o.scale, v)))
            .collect()
    }

    /// How many times `node` was evaluated during the pass.
    pub fn evaluations(&self, node: NodeId) -> u32 {
        self.evaluations[node]
    }
}

/// Per-node cotangents left behind by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Cotangents<T> {
    values: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Cotangents<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor4<T>> {
        self.values.get(node).and_then(|v| v.as_ref())
    }
}

/// Weights, bias, gradients and Adam moments for one parameter key.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot<T> {
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
    pub grad_weights: Tensor4<T>,
    pub grad_bias: Vec<T>,
    pub m_weights: Tensor4<T>,
    pub v_weights: Tensor4<T>,
    pub m_bias: Vec<T>,
    pub v_bias: Vec<T>,
}

impl<T: Real> ParamSlot<T> {
    pub fn new(weights: Tensor4<T>, bias: Vec<T>) -> Self {
        let d = weights.dims();
        let nb = bias.len();
        Self {
            weights,
            bias,
            grad_weights: Tensor4::zeros(d),
            grad_bias: vec![T::zero(); nb],
            m_weights: Tensor4::zeros(d),
            v_weights: Tensor4::zeros(d),
            m_bias: vec![T::zero(); nb],
            v_bias: vec![T::zero(); nb],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> ParamSlot<U> {
        let v = |xs: &[T]| xs.iter().map(|&x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        ParamSlot {
            weights: self.weights.cast(),
            bias: v(&self.bias),
            grad_weights: self.grad_weights.cast(),
            grad_bias: v(&self.grad_bias),
            m_weights: self.m_weights.cast(),
            v_weights: self.v_weights.cast(),
            m_bias: v(&self.m_bias),
            v_bias: v(&self.v_bias),
        }
    }
}

/// Named parameter collection, ordered by first use in the graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T> {
    slots: IndexMap<String, ParamSlot<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self { slots: IndexMap::new() }
    }

    pub fn insert(&mut self, key: impl Into<String>, slot: ParamSlot<T>) {
        self.slots.insert(key.into(), slot);
    }

    pub fn get(&self, key: &str) -> Option<&ParamSlot<T>> {
        self.slots.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut ParamSlot<T>> {
        self.slots.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamSlot<T>)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamSlot<T>)> {
        self.slots.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of trainable scalars, by enumeration of stored tensors.
    pub fn param_count(&self) -> usize {
        self.slots.values().map(ParamSlot::param_count).sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad_weights.fill(T::zero());
            slot.grad_bias.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            slots: self.slots.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Confirms every conv in `graph` has a correctly shaped entry.
    pub fn check_against(&self, graph: &Graph) -> Result<(), GraphError> {
        for (param, spec) in graph.param_specs() {
            let slot = self.get(&param).ok_or_else(|| GraphError::MissingParameter(param.clone()))?;
            let expected = spec.weight_dims();
            if slot.weights.dims() != expected || slot.bias.len() != spec.out_channels {
                return Err(GraphError::ParameterShape {
                    param,
                    stored: slot.weights.dims(),
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization of every conv,
/// weights then bias, in graph order, from a seeded ChaCha stream.
pub fn init_parameters<T: Real>(graph: &Graph, seed: u64) -> ParameterStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (param, spec) in graph.param_specs() {
        let bound = 1.0 / (spec.fan_in() as f64).sqrt();
        let mut draw = || T::from_f64(rng.random_range(-bound..=bound));
        let wd = spec.weight_dims();
        let weights: Vec<T> = (0..wd.len()).map(|_| draw()).collect();
        let bias: Vec<T> = (0..spec.out_channels).map(|_| draw()).collect();
        let weights = Tensor4::from_vec(wd, weights).expect("weight count matches dims");
        store.insert(param, ParamSlot::new(weights, bias));
    }
    store
}

/// Relative errors below this denominator are measured against it instead,
/// so gradients that vanish on both sides do not register as failures.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter key and flat index (weights first, then bias) of the worst entry.
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares analytic gradients of the MSE objective with central differences
/// for every parameter scalar, using the branch for `scale`.
pub fn gradient_check(
    graph: &Graph,
    store: &mut ParameterStore<f64>,
    input: &Tensor4<f64>,
    target: &Tensor4<f64>,
    scale: u32,
    h: f64,
) -> Result<GradCheckReport, GraphError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(GraphError::InvalidStep(h));
    }
    let loss_at = |store: &ParameterStore<f64>| -> Result<f64, GraphError> {
        let trace = graph.forward_scale(store, input, scale)?;
        let out = trace.output(scale).expect("selected branch evaluated");
        let (loss, _) = crate::train::mse_loss(out, target).map_err(node_err("loss"))?;
        Ok(loss)
    };

    let trace = graph.forward_scale(store, input, scale)?;
    let out = trace.output(scale).expect("selected branch evaluated");
    let (_, grad) = crate::train::mse_loss(out, target).map_err(node_err("loss"))?;
    graph.backward(store, &trace, &[(scale, grad)])?;

    let keys: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for key in keys {
        let n_w = store.get(&key).expect("key listed").weights.len();
        let n_b = store.get(&key).expect("key listed").bias.len();
        for idx in 0..n_w + n_b {
            let read = |s: &ParameterStore<f64>| {
                let slot = s.get(&key).expect("key listed");
                if idx < n_w {
                    (slot.weights.data()[idx], slot.grad_weights.data()[idx])
                } else {
                    (slot.bias[idx - n_w], slot.grad_bias[idx - n_w])
                }
            };
            let write = |s: &mut ParameterStore<f64>, v: f64| {
                let slot = s.get_mut(&key).expect("key listed");
                if idx < n_w {
                    slot.weights.data_mut()[idx] = v;
                } else {
                    slot.bias[idx - n_w] = v;
                }
            };
            let (orig, analytic) = read(store);
            write(store, orig + h);
            let plus = loss_at(store)?;
            write(store, orig - h);
            let minus = loss_at(store)?;
            write(store, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = err;
                report.worst_param = key.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
