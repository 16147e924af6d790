//! Graph passes that turn a single-exit network into a multi-exit
//! Monte-Carlo-dropout network, plus the algorithmic knobs explored by the
//! hardware search (channel scaling, fixed-point annotation).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netir::{
    FixedPointFormat, Granularity, GraphError, LayerKind, LayerNode, NetworkGraph, NodeId, QuantAnnotation, QuantScope,
};

const HEAD_INIT_SEED: u64 = 0x4845_4144_5F49_4E49;
const SCALE_INIT_SEED: u64 = 0x5343_414C_455F_494E;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("policy error: {0}")]
    Policy(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Where exit branches are attached. Every branch is
/// `GlobalAvgPool -> Dense(num_classes) -> ExitHead` (softmax inside the head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitPolicy {
    /// One exit after every max-pooling layer of the backbone.
    AfterEachPoolBlock,
    /// One exit after each listed backbone node.
    ExplicitIds(Vec<NodeId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McdPolicy {
    pub layers_per_exit: usize,
    pub keep_rate: f64,
    #[serde(default)]
    pub granularity: Granularity,
}

impl McdPolicy {
    pub fn new(layers_per_exit: usize, keep_rate: f64) -> Self {
        Self {
            layers_per_exit,
            keep_rate,
            granularity: Granularity::ElementWise,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        1.0 - self.keep_rate
    }
}

fn policy(msg: impl Into<String>) -> TransformError {
    TransformError::Policy(msg.into())
}

fn finish(mut graph: NetworkGraph, init_seed: Option<u64>) -> Result<NetworkGraph, TransformError> {
    graph.canonicalize();
    graph.validate()?;
    let mut graph = crate::netir::infer_shapes(&graph)?;
    if let Some(seed) = init_seed {
        graph.initialize_weights(seed, false)?;
    }
    Ok(graph)
}

/// Attaches exit branches to a single-exit network. Exits end up ordered
/// shallowest first with the original exit last.
pub fn insert_exits(graph: &NetworkGraph, exit_policy: &ExitPolicy) -> Result<NetworkGraph, TransformError> {
    if graph.n_exit() != 1 {
        return Err(policy(format!(
            "exit insertion expects a single-exit graph, found {} exits",
            graph.n_exit()
        )));
    }
    let backbone = graph.path_to(graph.final_exit());
    let anchors: Vec<NodeId> = match exit_policy {
        ExitPolicy::AfterEachPoolBlock => backbone
            .iter()
            .copied()
            .filter(|&id| matches!(graph.node(id).map(|n| &n.kind), Some(LayerKind::MaxPool { .. })))
            .collect(),
        ExitPolicy::ExplicitIds(ids) => {
            let mut seen = BTreeSet::new();
            for &id in ids {
                let node = graph
                    .node(id)
                    .ok_or_else(|| policy(format!("exit anchor {id} does not exist")))?;
                if node.kind.is_exit() || node.exit_branch || !backbone.contains(&id) {
                    return Err(policy(format!("exit anchor {id} lies inside an exit branch")));
                }
                if !seen.insert(id) {
                    return Err(policy(format!("exit anchor {id} listed twice")));
                }
            }
            backbone.iter().copied().filter(|id| seen.contains(id)).collect()
        }
    };

    let mut out = graph.clone();
    let mut next = out.next_id();
    let mut exits = Vec::with_capacity(anchors.len() + 1);
    for anchor in anchors {
        let mut chain = vec![
            LayerKind::GlobalAvgPool,
            LayerKind::Dense {
                out_features: graph.num_classes,
            },
            LayerKind::ExitHead {
                num_classes: graph.num_classes,
            },
        ];
        let mut parent = anchor;
        for kind in chain.drain(..) {
            let mut node = LayerNode::new(next, kind);
            node.exit_branch = true;
            out.nodes.push(node);
            out.edges.push((parent, next));
            parent = next;
            next += 1;
        }
        exits.push(parent);
    }
    exits.push(graph.final_exit());
    out.exits = exits;
    let init = graph.has_all_weights().then_some(HEAD_INIT_SEED);
    finish(out, init)
}

/// Inserts MC-dropout nodes in front of the last `layers_per_exit` weighted
/// layers on the path to every exit. A layer shared by several exits gets a
/// single dropout node.
pub fn insert_mcd(graph: &NetworkGraph, mcd: &McdPolicy) -> Result<NetworkGraph, TransformError> {
    if !(mcd.keep_rate > 0.0 && mcd.keep_rate <= 1.0) {
        return Err(policy(format!("keep_rate {} outside (0, 1]", mcd.keep_rate)));
    }
    if mcd.layers_per_exit == 0 {
        return Ok(graph.clone());
    }
    let mut targets = BTreeSet::new();
    for &exit in graph.exits() {
        let weighted: Vec<NodeId> = graph
            .path_to(exit)
            .into_iter()
            .rev()
            .filter(|&id| graph.node(id).is_some_and(|n| n.kind.is_weighted()))
            .collect();
        if weighted.len() < mcd.layers_per_exit {
            return Err(policy(format!(
                "exit {exit} has {} weighted layers, cannot place {} dropout layers",
                weighted.len(),
                mcd.layers_per_exit
            )));
        }
        targets.extend(weighted.into_iter().take(mcd.layers_per_exit));
    }

    let mut out = graph.clone();
    let mut next = out.next_id();
    for target in targets {
        let producer = out.producer(target).expect("weighted layers have a producer");
        if out.node(producer).is_some_and(|n| n.kind.is_mcd()) {
            continue;
        }
        let mut node = LayerNode::new(
            next,
            LayerKind::McDropout {
                keep_rate: mcd.keep_rate,
                granularity: mcd.granularity,
            },
        );
        node.exit_branch = out.node(target).is_some_and(|n| n.exit_branch);
        out.nodes.push(node);
        let edge = out
            .edges
            .iter_mut()
            .find(|e| **e == (producer, target))
            .expect("edge exists");
        *edge = (producer, next);
        out.edges.push((next, target));
        next += 1;
    }
    finish(out, None)
}

/// Partition of a graph into the deterministic prefix and the stochastic
/// part re-evaluated on every Monte-Carlo pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Components {
    pub non_bayesian: BTreeSet<NodeId>,
    pub bayesian: BTreeSet<NodeId>,
}

impl Components {
    /// Non-Bayesian nodes whose outputs feed the Bayesian part; these are the
    /// tensors cached and cloned across passes.
    pub fn boundary(&self, graph: &NetworkGraph) -> Vec<NodeId> {
        self.non_bayesian
            .iter()
            .copied()
            .filter(|&id| graph.consumers(id).iter().any(|c| self.bayesian.contains(c)))
            .collect()
    }

    /// Total elements of the boundary tensors.
    pub fn boundary_elements(&self, graph: &NetworkGraph) -> usize {
        self.boundary(graph)
            .into_iter()
            .filter_map(|id| graph.node(id).and_then(|n| n.output_shape))
            .map(|s| s.numel())
            .sum()
    }
}

/// Bayesian = every node at or downstream of a dropout node.
pub fn split_components(graph: &NetworkGraph) -> Components {
    let mut bayesian = BTreeSet::new();
    for m in graph.mcd_nodes() {
        if !bayesian.contains(&m) {
            bayesian.extend(graph.descendants(m));
        }
    }
    let non_bayesian = graph
        .nodes()
        .iter()
        .map(|n| n.id)
        .filter(|id| !bayesian.contains(id))
        .collect();
    Components { non_bayesian, bayesian }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelFraction {
    #[serde(rename = "1")]
    Full,
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "1/4")]
    Quarter,
    #[serde(rename = "1/8")]
    Eighth,
}

impl ChannelFraction {
    pub const ALL: [ChannelFraction; 4] = [Self::Full, Self::Half, Self::Quarter, Self::Eighth];

    pub fn denominator(&self) -> usize {
        match self {
            Self::Full => 1,
            Self::Half => 2,
            Self::Quarter => 4,
            Self::Eighth => 8,
        }
    }

    pub fn scale(&self, width: usize) -> usize {
        width.div_ceil(self.denominator()).max(1)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Full => "1",
            Self::Half => "1/2",
            Self::Quarter => "1/4",
            Self::Eighth => "1/8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.label() == s)
    }
}

/// Whether a dense layer feeds an exit head without another weighted layer
/// in between (its width is the class count and must not be scaled).
fn is_classifier(graph: &NetworkGraph, id: NodeId) -> bool {
    let mut stack = graph.consumers(id);
    while let Some(n) = stack.pop() {
        let node = graph.node(n).expect("consumer exists");
        if node.kind.is_exit() {
            return true;
        }
        if !node.kind.is_weighted() {
            stack.extend(graph.consumers(n));
        }
    }
    false
}

/// Scales conv output channels and hidden dense widths by `fraction`
/// (rounded up, at least 1). Weights are re-initialized.
pub fn scale_channels(graph: &NetworkGraph, fraction: ChannelFraction) -> Result<NetworkGraph, TransformError> {
    if fraction == ChannelFraction::Full {
        return Ok(graph.clone());
    }
    let had_weights = graph.has_all_weights();
    let mut out = graph.without_weights();
    let classifiers: BTreeSet<NodeId> = graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::Dense { .. }) && is_classifier(graph, n.id))
        .map(|n| n.id)
        .collect();
    for node in &mut out.nodes {
        match &mut node.kind {
            LayerKind::Conv2D { out_channels, .. } => *out_channels = fraction.scale(*out_channels),
            LayerKind::Dense { out_features } if !classifiers.contains(&node.id) => {
                *out_features = fraction.scale(*out_features)
            }
            _ => {}
        }
    }
    let seed = SCALE_INIT_SEED ^ fraction.denominator() as u64;
    finish(out, had_weights.then_some(seed))
}

/// Attaches the same fixed-point annotation to every node.
pub fn annotate_quantization(graph: &NetworkGraph, format: FixedPointFormat, scope: QuantScope) -> NetworkGraph {
    let mut out = graph.clone();
    for node in &mut out.nodes {
        node.quant = Some(QuantAnnotation { format, scope });
    }
    out
}

/// Overrides the annotation of a single node.
pub fn annotate_node(
    graph: &NetworkGraph,
    id: NodeId,
    format: FixedPointFormat,
    scope: QuantScope,
) -> Result<NetworkGraph, TransformError> {
    let mut out = graph.clone();
    let node = out
        .node_mut(id)
        .ok_or_else(|| policy(format!("node {id} does not exist")))?;
    node.quant = Some(QuantAnnotation { format, scope });
    Ok(out)
}

pub fn strip_quantization(graph: &NetworkGraph) -> NetworkGraph {
    let mut out = graph.clone();
    for node in &mut out.nodes {
        node.quant = None;
    }
    out
}

/// Removes every dropout node, reconnecting its producer to its consumers.
pub fn strip_mcd(graph: &NetworkGraph) -> Result<NetworkGraph, TransformError> {
    let mut out = graph.clone();
    for m in graph.mcd_nodes() {
        let producer = out.producer(m).expect("dropout nodes have a producer");
        out.edges.retain(|e| e.1 != m);
        for e in out.edges.iter_mut().filter(|e| e.0 == m) {
            e.0 = producer;
        }
        out.nodes.retain(|n| n.id != m);
    }
    finish(out, None)
}

/// Keeps only the final exit and its ancestors.
pub fn strip_exits(graph: &NetworkGraph) -> Result<NetworkGraph, TransformError> {
    let keep = graph.ancestors(graph.final_exit());
    let mut out = graph.clone();
    out.nodes.retain(|n| keep.contains(&n.id));
    out.edges.retain(|e| keep.contains(&e.0) && keep.contains(&e.1));
    out.exits = vec![graph.final_exit()];
    finish(out, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netir::{GraphBuilder, TensorShape};
    use crate::samples;

    fn no_pool_net() -> NetworkGraph {
        let mut b = GraphBuilder::new("mlp", 3, TensorShape::vector(4));
        b.push(LayerKind::Dense { out_features: 6 });
        b.push(LayerKind::ReLU);
        b.push(LayerKind::Dense { out_features: 3 });
        b.push_exit();
        b.build().unwrap()
    }

    #[test]
    fn no_pooling_keeps_single_exit() {
        let g = no_pool_net();
        let me = insert_exits(&g, &ExitPolicy::AfterEachPoolBlock).unwrap();
        assert_eq!(me, g);
        assert_eq!(me.exits(), &[4]);
    }

    #[test]
    fn lenet_gets_three_exits() {
        let g = samples::lenet_like();
        let me = insert_exits(&g, &ExitPolicy::AfterEachPoolBlock).unwrap();
        assert_eq!(me.n_exit(), 3);
        assert_eq!(*me.exits().last().unwrap(), g.final_exit());
        // heads attached to the two pooling layers (ids 3 and 6)
        let anchors: Vec<NodeId> = me.exits()[..2]
            .iter()
            .map(|&e| me.path_to(e).into_iter().rev().nth(3).unwrap())
            .collect();
        assert_eq!(anchors, vec![3, 6]);
    }

    #[test]
    fn explicit_anchor_gives_two_exits() {
        let g = samples::lenet_like();
        let me = insert_exits(&g, &ExitPolicy::ExplicitIds(vec![4])).unwrap();
        assert_eq!(me.n_exit(), 2);
        let head: Vec<&LayerKind> = me
            .path_to(me.exits()[0])
            .iter()
            .map(|&i| &me.node(i).unwrap().kind)
            .collect();
        assert!(matches!(
            head[head.len() - 3..],
            [
                LayerKind::GlobalAvgPool,
                LayerKind::Dense { out_features: 10 },
                LayerKind::ExitHead { .. }
            ]
        ));
    }

    #[test]
    fn explicit_anchor_inside_branch_rejected() {
        let g = samples::lenet_like();
        let err = insert_exits(&g, &ExitPolicy::ExplicitIds(vec![8])).unwrap_err();
        assert!(matches!(err, TransformError::Policy(_)));
        assert!(insert_exits(&g, &ExitPolicy::ExplicitIds(vec![99])).is_err());
        let me = insert_exits(&g, &ExitPolicy::AfterEachPoolBlock).unwrap();
        assert!(insert_exits(&me, &ExitPolicy::AfterEachPoolBlock).is_err());
    }

    #[test]
    fn zero_mcd_layers_is_identity() {
        let me = insert_exits(&samples::lenet_like(), &ExitPolicy::AfterEachPoolBlock).unwrap();
        assert_eq!(insert_mcd(&me, &McdPolicy::new(0, 0.5)).unwrap(), me);
    }

    #[test]
    fn one_mcd_per_exit() {
        let me = insert_exits(&samples::lenet_like(), &ExitPolicy::AfterEachPoolBlock).unwrap();
        let bnn = insert_mcd(&me, &McdPolicy::new(1, 0.75)).unwrap();
        assert_eq!(bnn.mcd_nodes().len(), 3);
        for &e in bnn.exits() {
            let path = bnn.path_to(e);
            let kinds: Vec<&LayerKind> = path.iter().map(|&i| &bnn.node(i).unwrap().kind).collect();
            let n = kinds.len();
            assert!(kinds[n - 3].is_mcd(), "{kinds:?}");
            assert!(kinds[n - 2].is_weighted());
        }
    }

    #[test]
    fn single_exit_two_layers_matches_hand_graph() {
        let g = samples::lenet_like();
        let bnn = insert_mcd(&g, &McdPolicy::new(2, 0.5)).unwrap();
        // hand-drawn: in -> conv1 -> relu -> pool -> MCD -> conv2 -> relu -> pool -> MCD -> dense -> exit
        let kinds: Vec<&str> = bnn
            .path_to(8)
            .iter()
            .map(|&i| bnn.node(i).unwrap().kind.name())
            .collect();
        assert_eq!(
            kinds,
            vec![
                "input",
                "conv2d",
                "relu",
                "maxpool",
                "mc_dropout",
                "conv2d",
                "relu",
                "maxpool",
                "mc_dropout",
                "dense",
                "exit_head"
            ]
        );
        assert_eq!(bnn.producer(4), Some(9));
        assert_eq!(bnn.producer(7), Some(10));
    }

    #[test]
    fn shared_layers_get_one_dropout_node() {
        let me = insert_exits(&samples::lenet_like(), &ExitPolicy::AfterEachPoolBlock).unwrap();
        let bnn = insert_mcd(&me, &McdPolicy::new(2, 0.5)).unwrap();
        // exit 1: head dense + conv1; exit 2: head dense + conv2; final: dense7 + conv2
        assert_eq!(bnn.mcd_nodes().len(), 5);
        for m in bnn.mcd_nodes() {
            assert_eq!(bnn.consumers(m).len(), 1);
        }
    }

    #[test]
    fn too_many_mcd_layers_rejected() {
        let me = insert_exits(&samples::lenet_like(), &ExitPolicy::AfterEachPoolBlock).unwrap();
        // shallowest exit path holds conv1 and its head dense only
        assert!(matches!(
            insert_mcd(&me, &McdPolicy::new(3, 0.5)),
            Err(TransformError::Policy(_))
        ));
        assert!(insert_mcd(&me, &McdPolicy::new(1, 0.0)).is_err());
    }

    #[test]
    fn components_of_mcd_first_graph() {
        let mut b = GraphBuilder::new("m", 2, TensorShape::vector(3));
        b.push(LayerKind::McDropout {
            keep_rate: 0.5,
            granularity: Granularity::ElementWise,
        });
        b.push(LayerKind::Dense { out_features: 2 });
        b.push_exit();
        let g = b.build().unwrap();
        let c = split_components(&g);
        assert_eq!(c.non_bayesian, BTreeSet::from([0]));
        assert_eq!(c.bayesian, BTreeSet::from([1, 2, 3]));
        assert_eq!(c.boundary(&g), vec![0]);
        assert_eq!(c.boundary_elements(&g), 3);
    }

    #[test]
    fn components_without_mcd() {
        let c = split_components(&samples::lenet_like());
        assert!(c.bayesian.is_empty());
        assert_eq!(c.non_bayesian.len(), 9);
    }

    #[test]
    fn channel_scaling() {
        let g = samples::lenet_like();
        assert_eq!(scale_channels(&g, ChannelFraction::Full).unwrap(), g);
        let half = scale_channels(&g, ChannelFraction::Half).unwrap();
        assert!(matches!(
            half.node(4).unwrap().kind,
            LayerKind::Conv2D { out_channels: 4, .. }
        ));
        assert!(matches!(
            half.node(1).unwrap().kind,
            LayerKind::Conv2D { out_channels: 2, .. }
        ));
        let eighth = scale_channels(&g, ChannelFraction::Eighth).unwrap();
        assert!(matches!(
            eighth.node(1).unwrap().kind,
            LayerKind::Conv2D { out_channels: 1, .. }
        ));
        // classifier width is the class count
        assert!(matches!(
            eighth.node(7).unwrap().kind,
            LayerKind::Dense { out_features: 10 }
        ));
    }

    #[test]
    fn channel_scaling_reinitializes_weights() {
        let mut g = no_pool_net();
        g.initialize_weights(1, true).unwrap();
        let half = scale_channels(&g, ChannelFraction::Half).unwrap();
        assert!(matches!(
            half.node(1).unwrap().kind,
            LayerKind::Dense { out_features: 3 }
        ));
        assert_eq!(half.node(1).unwrap().weights.as_ref().unwrap().kernel.len(), 12);
        assert!(half.has_all_weights());
    }

    #[test]
    fn quantization_annotation() {
        let g = samples::lenet_like();
        let f16 = FixedPointFormat::new(16, 4, true).unwrap();
        let annotated = annotate_quantization(&g, f16, QuantScope::Both);
        assert_ne!(annotated, g);
        assert_eq!(strip_quantization(&annotated), g);

        let f4 = FixedPointFormat::new(4, 2, true).unwrap();
        let all4 = annotate_quantization(&g, f4, QuantScope::Weights);
        assert!(all4.nodes().iter().all(|n| n.quant.map(|q| q.format) == Some(f4)));

        let mixed = annotate_node(&all4, 4, f16, QuantScope::Activations).unwrap();
        assert_eq!(mixed.node(4).unwrap().quant.unwrap().format, f16);
        assert_eq!(mixed.node(1).unwrap().quant.unwrap().format, f4);
        assert!(annotate_node(&g, 77, f16, QuantScope::Both).is_err());
    }

    #[test]
    fn transforms_are_additive() {
        let g = samples::lenet_like();
        let me = insert_exits(&g, &ExitPolicy::AfterEachPoolBlock).unwrap();
        let bnn = insert_mcd(&me, &McdPolicy::new(2, 0.5)).unwrap();
        let back = strip_exits(&strip_mcd(&bnn).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
