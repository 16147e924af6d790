//! Typed computation-graph IR for small feed-forward CNN/MLP networks.
//!
//! A [`NetworkGraph`] is a DAG with a single [`LayerKind::Input`] source in
//! which every other node has exactly one producer. Branching only happens
//! where exit classifiers leave the backbone.

mod builder;
mod doc;
mod shape;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub use builder::GraphBuilder;
pub use doc::{load_graph, save_graph, to_canonical_string};
pub use shape::infer_shapes;

pub type NodeId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error in `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("shape mismatch at node {node}: expected {expected}, found {found}")]
    ShapeMismatch {
        node: NodeId,
        expected: String,
        found: String,
    },
    #[error("graph contains a cycle through node {node}")]
    Cycle { node: NodeId },
    #[error("invalid graph: {0}")]
    Invalid(String),
}

impl GraphError {
    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        GraphError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Shape of a flat feature vector.
    pub fn vector(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn is_valid(&self) -> bool {
        self.channels >= 1 && self.height >= 1 && self.width >= 1
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Granularity {
    /// One draw per activation.
    #[default]
    #[serde(rename = "element")]
    ElementWise,
    /// One draw per channel (filter-wise mask).
    #[serde(rename = "channel")]
    ChannelWise,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input,
    Conv2D {
        kernel: usize,
        stride: usize,
        out_channels: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    ReLU,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Softmax,
    McDropout {
        keep_rate: f64,
        granularity: Granularity,
    },
    /// Terminal classifier output; applies softmax to its logits.
    ExitHead {
        num_classes: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Softmax => "softmax",
            LayerKind::McDropout { .. } => "mc_dropout",
            LayerKind::ExitHead { .. } => "exit_head",
        }
    }

    /// Conv and dense layers carry trainable parameters.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv2D { .. } | LayerKind::Dense { .. })
    }

    pub fn is_mcd(&self) -> bool {
        matches!(self, LayerKind::McDropout { .. })
    }

    pub fn is_exit(&self) -> bool {
        matches!(self, LayerKind::ExitHead { .. })
    }
}

/// Flat parameter arrays: conv `[c_out][c_in][k][k]`, dense `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Weights {
    pub fn len(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed-point number format. Rounding is ties-to-even and overflow
/// saturates; `integer_bits` includes the sign bit when `signed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u8,
    pub integer_bits: u8,
    pub signed: bool,
}

pub const SUPPORTED_BITWIDTHS: [u8; 5] = [4, 6, 8, 16, 32];

impl FixedPointFormat {
    pub fn new(total_bits: u8, integer_bits: u8, signed: bool) -> Result<Self, GraphError> {
        let fmt = Self {
            total_bits,
            integer_bits,
            signed,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if !SUPPORTED_BITWIDTHS.contains(&self.total_bits) {
            return Err(GraphError::schema(
                "quant.total_bits",
                format!("{} not in {:?}", self.total_bits, SUPPORTED_BITWIDTHS),
            ));
        }
        if self.integer_bits < 1 || self.integer_bits > self.total_bits {
            return Err(GraphError::schema(
                "quant.integer_bits",
                format!("must be in 1..={}", self.total_bits),
            ));
        }
        Ok(())
    }

    pub fn fractional_bits(&self) -> u8 {
        self.total_bits - self.integer_bits
    }

    /// Default split used by the design-space search: a quarter of the bits
    /// (at least two) for the integer part.
    pub fn with_total_bits(total_bits: u8) -> Result<Self, GraphError> {
        let integer_bits = (total_bits / 4).max(2).min(total_bits);
        Self::new(total_bits, integer_bits, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScope {
    Weights,
    Activations,
    Both,
}

impl QuantScope {
    pub fn weights(&self) -> bool {
        matches!(self, QuantScope::Weights | QuantScope::Both)
    }

    pub fn activations(&self) -> bool {
        matches!(self, QuantScope::Activations | QuantScope::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantAnnotation {
    pub format: FixedPointFormat,
    pub scope: QuantScope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: LayerKind,
    pub input_shape: Option<TensorShape>,
    pub output_shape: Option<TensorShape>,
    pub weights: Option<Weights>,
    pub quant: Option<QuantAnnotation>,
    /// Node belongs to an exit classifier branch rather than the backbone.
    pub exit_branch: bool,
}

impl LayerNode {
    pub fn new(id: NodeId, kind: LayerKind) -> Self {
        Self {
            id,
            kind,
            input_shape: None,
            output_shape: None,
            weights: None,
            quant: None,
            exit_branch: false,
        }
    }

    pub fn output(&self) -> Option<TensorShape> {
        self.output_shape
    }

    /// Expected `(kernel, bias)` lengths, once shapes are known.
    pub fn weight_lens(&self) -> Option<(usize, usize)> {
        let input = self.input_shape?;
        match self.kind {
            LayerKind::Conv2D {
                kernel, out_channels, ..
            } => Some((out_channels * input.channels * kernel * kernel, out_channels)),
            LayerKind::Dense { out_features } => Some((out_features * input.numel(), out_features)),
            _ => None,
        }
    }

    /// Fan-in of one output unit of a weighted layer.
    pub fn fan_in(&self) -> Option<usize> {
        let input = self.input_shape?;
        match self.kind {
            LayerKind::Conv2D { kernel, .. } => Some(kernel * kernel * input.channels),
            LayerKind::Dense { .. } => Some(input.numel()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub(crate) name: String,
    pub(crate) num_classes: usize,
    pub(crate) input_shape: TensorShape,
    pub(crate) nodes: Vec<LayerNode>,
    pub(crate) edges: Vec<(NodeId, NodeId)>,
    pub(crate) exits: Vec<NodeId>,
}

impl NetworkGraph {
    /// Assembles and validates a graph, then infers shapes.
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        input_shape: TensorShape,
        nodes: Vec<LayerNode>,
        edges: Vec<(NodeId, NodeId)>,
        exits: Vec<NodeId>,
    ) -> Result<Self, GraphError> {
        let mut graph = Self {
            name: name.into(),
            num_classes,
            input_shape,
            nodes,
            edges,
            exits,
        };
        graph.canonicalize();
        graph.validate()?;
        infer_shapes(&graph)
    }

    /// Sorts nodes by id and edges lexicographically.
    pub(crate) fn canonicalize(&mut self) {
        self.nodes.sort_by_key(|n| n.id);
        self.edges.sort_unstable();
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    /// Exit heads ordered from shallowest to deepest.
    pub fn exits(&self) -> &[NodeId] {
        &self.exits
    }

    pub fn n_exit(&self) -> usize {
        self.exits.len()
    }

    pub fn final_exit(&self) -> NodeId {
        *self.exits.last().expect("validated graphs have an exit")
    }

    pub fn node(&self, id: NodeId) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut LayerNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn input_id(&self) -> NodeId {
        self.nodes
            .iter()
            .find(|n| n.kind == LayerKind::Input)
            .map(|n| n.id)
            .expect("validated graphs have an input")
    }

    pub fn producer(&self, id: NodeId) -> Option<NodeId> {
        self.edges.iter().find(|e| e.1 == id).map(|e| e.0)
    }

    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.edges.iter().filter(|e| e.0 == id).map(|e| e.1).collect();
        out.sort_unstable();
        out
    }

    pub fn next_id(&self) -> NodeId {
        self.nodes.iter().map(|n| n.id).max().map_or(0, |m| m + 1)
    }

    /// Kahn order with lowest-id tie-breaking.
    pub fn topo_order(&self) -> Vec<NodeId> {
        topo_sort(&self.nodes, &self.edges).expect("validated graphs are acyclic")
    }

    /// `id` and everything upstream of it.
    pub fn ancestors(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            if !out.insert(n) {
                break;
            }
            cur = self.producer(n);
        }
        out
    }

    /// `id` and everything downstream of it.
    pub fn descendants(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::from([id]);
        while let Some(n) = queue.pop_front() {
            if out.insert(n) {
                queue.extend(self.consumers(n));
            }
        }
        out
    }

    /// Path from the input to `id`, input first.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            if path.contains(&n) {
                break;
            }
            path.push(n);
            cur = self.producer(n);
        }
        path.reverse();
        path
    }

    /// Depth key of an exit: how many backbone nodes lie upstream of it.
    pub fn exit_depth(&self, exit: NodeId) -> usize {
        self.ancestors(exit)
            .iter()
            .filter_map(|&n| self.node(n))
            .filter(|n| !n.exit_branch && !n.kind.is_exit())
            .count()
    }

    /// For each node, the set of exits reachable from it.
    pub fn exit_reach(&self) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        let mut reach: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for &e in &self.exits {
            for a in self.ancestors(e) {
                reach.entry(a).or_default().insert(e);
            }
        }
        reach
    }

    pub fn mcd_nodes(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.nodes.iter().filter(|n| n.kind.is_mcd()).map(|n| n.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Checks every structural invariant. Shapes are not required.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(GraphError::Invalid(format!("duplicate node id {}", n.id)));
            }
            validate_kind(n, self.num_classes)?;
            if let Some(q) = &n.quant {
                q.format.validate()?;
            }
        }
        if !self.input_shape.is_valid() {
            return Err(GraphError::schema("input_shape", "all dimensions must be >= 1"));
        }
        if self.num_classes < 1 {
            return Err(GraphError::schema("num_classes", "must be >= 1"));
        }
        let mut seen_edges = BTreeSet::new();
        let mut in_degree: BTreeMap<NodeId, usize> = ids.iter().map(|&i| (i, 0)).collect();
        for &(src, dst) in &self.edges {
            if !ids.contains(&src) || !ids.contains(&dst) {
                return Err(GraphError::schema(
                    "edges",
                    format!("edge [{src},{dst}] references unknown node"),
                ));
            }
            if src == dst {
                return Err(GraphError::Cycle { node: src });
            }
            if !seen_edges.insert((src, dst)) {
                return Err(GraphError::schema("edges", format!("duplicate edge [{src},{dst}]")));
            }
            *in_degree.get_mut(&dst).unwrap() += 1;
        }
        topo_sort(&self.nodes, &self.edges)?;

        let inputs: Vec<&LayerNode> = self.nodes.iter().filter(|n| n.kind == LayerKind::Input).collect();
        if inputs.len() != 1 {
            return Err(GraphError::Invalid(format!(
                "expected exactly one input node, found {}",
                inputs.len()
            )));
        }
        for n in &self.nodes {
            let deg = in_degree[&n.id];
            match (&n.kind, deg) {
                (LayerKind::Input, 0) => {}
                (LayerKind::Input, _) => {
                    return Err(GraphError::Invalid(format!("input node {} has a producer", n.id)));
                }
                (_, 1) => {}
                (_, d) => {
                    return Err(GraphError::Invalid(format!(
                        "node {} has {d} producers; layers take exactly one input",
                        n.id
                    )));
                }
            }
            let has_consumer = self.edges.iter().any(|e| e.0 == n.id);
            if n.kind.is_exit() && has_consumer {
                return Err(GraphError::Invalid(format!(
                    "exit head {} must terminate its branch",
                    n.id
                )));
            }
            if !n.kind.is_exit() && !has_consumer {
                return Err(GraphError::Invalid(format!("node {} does not lead to any exit", n.id)));
            }
        }

        if self.exits.is_empty() {
            return Err(GraphError::schema("exits", "at least one exit is required"));
        }
        let exit_set: BTreeSet<NodeId> = self.exits.iter().copied().collect();
        if exit_set.len() != self.exits.len() {
            return Err(GraphError::schema("exits", "duplicate exit id"));
        }
        for n in &self.nodes {
            if n.kind.is_exit() != exit_set.contains(&n.id) {
                return Err(GraphError::schema(
                    "exits",
                    format!("node {} exit-head kind and exit list disagree", n.id),
                ));
            }
        }
        for &e in &self.exits {
            if !ids.contains(&e) {
                return Err(GraphError::schema("exits", format!("unknown exit id {e}")));
            }
        }
        let depths: Vec<usize> = self.exits.iter().map(|&e| self.exit_depth(e)).collect();
        if depths.windows(2).any(|w| w[0] > w[1]) {
            return Err(GraphError::schema(
                "exits",
                format!("exits must be listed shallowest first (depths {depths:?})"),
            ));
        }
        Ok(())
    }

    /// Fills weights on every weighted layer that has none (or all of them
    /// when `overwrite`). He-uniform kernels, zero bias. Shapes must be known.
    pub fn initialize_weights(&mut self, seed: u64, overwrite: bool) -> Result<(), GraphError> {
        for node in &mut self.nodes {
            if !node.kind.is_weighted() || (node.weights.is_some() && !overwrite) {
                continue;
            }
            let (k_len, b_len) = node.weight_lens().ok_or_else(|| GraphError::ShapeMismatch {
                node: node.id,
                expected: "inferred input shape".into(),
                found: "none".into(),
            })?;
            let fan_in = node.fan_in().unwrap_or(1).max(1) as f64;
            let limit = (6.0 / fan_in).sqrt();
            let mut rng = Rng::new(crate::rng::item_seed(seed, node.id as u64));
            let kernel = (0..k_len).map(|_| rng.uniform(-limit, limit)).collect();
            node.weights = Some(Weights {
                kernel,
                bias: vec![0.0; b_len],
            });
        }
        Ok(())
    }

    /// Returns a copy with weights removed from every node.
    pub fn without_weights(&self) -> Self {
        let mut g = self.clone();
        for n in &mut g.nodes {
            n.weights = None;
        }
        g
    }

    pub fn has_all_weights(&self) -> bool {
        self.nodes.iter().all(|n| !n.kind.is_weighted() || n.weights.is_some())
    }

    /// Replaces the weights of a weighted layer; lengths must match its shape.
    pub fn set_weights(&mut self, id: NodeId, weights: Weights) -> Result<(), GraphError> {
        let node = self
            .node_mut(id)
            .ok_or_else(|| GraphError::Invalid(format!("unknown node {id}")))?;
        let lens = node
            .weight_lens()
            .ok_or_else(|| GraphError::schema(format!("nodes[{id}].weights"), "layer carries no weights"))?;
        if (weights.kernel.len(), weights.bias.len()) != lens {
            return Err(GraphError::ShapeMismatch {
                node: id,
                expected: format!("{} kernel / {} bias values", lens.0, lens.1),
                found: format!("{} / {}", weights.kernel.len(), weights.bias.len()),
            });
        }
        node.weights = Some(weights);
        Ok(())
    }
}

fn validate_kind(node: &LayerNode, num_classes: usize) -> Result<(), GraphError> {
    let field = |f: &str| format!("nodes[{}].params.{f}", node.id);
    match node.kind {
        LayerKind::Conv2D {
            kernel,
            stride,
            out_channels,
            ..
        } => {
            if kernel == 0 {
                return Err(GraphError::schema(field("kernel"), "must be >= 1"));
            }
            if stride == 0 {
                return Err(GraphError::schema(field("stride"), "must be >= 1"));
            }
            if out_channels == 0 {
                return Err(GraphError::schema(field("out_channels"), "must be >= 1"));
            }
        }
        LayerKind::Dense { out_features: 0 } => {
            return Err(GraphError::schema(field("out_features"), "must be >= 1"));
        }
        LayerKind::MaxPool { kernel, stride } if kernel == 0 || stride == 0 => {
            return Err(GraphError::schema(field("kernel"), "kernel and stride must be >= 1"));
        }
        LayerKind::McDropout { keep_rate, .. } if !(keep_rate > 0.0 && keep_rate <= 1.0) => {
            return Err(GraphError::schema(field("keep_rate"), "must lie in (0, 1]"));
        }
        LayerKind::ExitHead { num_classes: c } if c != num_classes => {
            return Err(GraphError::schema(
                field("num_classes"),
                format!("{c} differs from graph num_classes {num_classes}"),
            ));
        }
        _ => {}
    }
    if node.weights.is_some() && !node.kind.is_weighted() {
        return Err(GraphError::schema(
            format!("nodes[{}].weights", node.id),
            "only conv2d and dense layers carry weights",
        ));
    }
    Ok(())
}

pub(crate) fn topo_sort(nodes: &[LayerNode], edges: &[(NodeId, NodeId)]) -> Result<Vec<NodeId>, GraphError> {
    let mut in_degree: BTreeMap<NodeId, usize> = nodes.iter().map(|n| (n.id, 0)).collect();
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(s, d) in edges {
        if let Some(v) = in_degree.get_mut(&d) {
            *v += 1;
        }
        adj.entry(s).or_default().push(d);
    }
    let mut ready: BTreeSet<NodeId> = in_degree.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| i).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(n) = ready.pop_first() {
        order.push(n);
        for &m in adj.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            let d = in_degree.get_mut(&m).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(m);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = in_degree
            .iter()
            .find(|(_, &d)| d > 0)
            .map(|(&i, _)| i)
            .unwrap_or_default();
        return Err(GraphError::Cycle { node: stuck });
    }
    Ok(order)
}
