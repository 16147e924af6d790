//! Analytical FLOP model: per-layer counts, the single-exit and multi-exit
//! Monte-Carlo sampling costs and their ratio.
//!
//! One multiply-accumulate counts as two FLOPs. Element-wise layers
//! (activation, pooling, dropout, softmax) cost one FLOP per output element.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::netir::{LayerKind, LayerNode, NetworkGraph, NodeId};
use crate::transform::split_components;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlopError {
    #[error("node {0} has no inferred shape")]
    ShapeMissing(NodeId),
    #[error("{n_sample} samples cannot be split evenly over {n_exit} exits")]
    IndivisibleSamples { n_sample: u64, n_exit: u64 },
    #[error("sample and exit counts must be >= 1")]
    ZeroCount,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub per_layer: BTreeMap<NodeId, u64>,
    pub flop_main: u64,
    pub flop_exit: u64,
    pub alpha: f64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.flop_main + self.flop_exit
    }
}

pub fn layer_flops(node: &LayerNode) -> Result<u64, FlopError> {
    let (Some(input), Some(output)) = (node.input_shape, node.output_shape) else {
        return Err(FlopError::ShapeMissing(node.id));
    };
    let out = output.numel() as u64;
    Ok(match node.kind {
        LayerKind::Input => 0,
        LayerKind::Conv2D { kernel, .. } => 2 * (kernel * kernel * input.channels) as u64 * out,
        LayerKind::Dense { .. } => 2 * input.numel() as u64 * out,
        LayerKind::ReLU
        | LayerKind::MaxPool { .. }
        | LayerKind::GlobalAvgPool
        | LayerKind::Softmax
        | LayerKind::McDropout { .. }
        | LayerKind::ExitHead { .. } => out,
    })
}

/// Whether a node is counted in `flop_exit` (exit classifier branches and
/// the exit heads themselves) rather than in the main body.
pub fn is_exit_node(node: &LayerNode) -> bool {
    node.exit_branch || node.kind.is_exit()
}

pub fn count_flops(graph: &NetworkGraph) -> Result<FlopReport, FlopError> {
    let mut per_layer = BTreeMap::new();
    let (mut main, mut exit) = (0u64, 0u64);
    for node in graph.nodes() {
        let f = layer_flops(node)?;
        per_layer.insert(node.id, f);
        if is_exit_node(node) {
            exit += f;
        } else {
            main += f;
        }
    }
    let alpha = if main == 0 { 0.0 } else { exit as f64 / main as f64 };
    Ok(FlopReport {
        per_layer,
        flop_main: main,
        flop_exit: exit,
        alpha,
    })
}

/// Cost of `n_sample` full passes of a single-exit network.
pub fn single_exit_cost(flop_main: u64, flop_exit: u64, n_sample: u64) -> u64 {
    n_sample * (flop_main + flop_exit)
}

/// Cost of drawing `n_sample` samples from an `n_exit` multi-exit network:
/// the main body once, the exits `n_sample / n_exit` times.
pub fn multi_exit_cost(flop_main: u64, flop_exit: u64, n_sample: u64, n_exit: u64) -> Result<u64, FlopError> {
    let n_pass = passes(n_sample, n_exit)?;
    Ok(flop_main + n_pass * flop_exit)
}

/// `n_sample / n_exit`, rejecting uneven splits.
pub fn passes(n_sample: u64, n_exit: u64) -> Result<u64, FlopError> {
    if n_sample == 0 || n_exit == 0 {
        return Err(FlopError::ZeroCount);
    }
    if !n_sample.is_multiple_of(n_exit) {
        return Err(FlopError::IndivisibleSamples { n_sample, n_exit });
    }
    Ok(n_sample / n_exit)
}

/// Ratio of the single-exit to the multi-exit sampling cost, with
/// `alpha = flop_exit / flop_main`.
pub fn reduction_rate(alpha: f64, n_sample: u64, n_exit: u64) -> f64 {
    (1.0 + alpha) / (1.0 / n_sample as f64 + alpha / n_exit as f64)
}

/// FLOPs of the cached (deterministic) part and of one stochastic pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CachedCost {
    pub non_bayesian: u64,
    pub bayesian: u64,
}

impl CachedCost {
    pub fn total(&self, n_pass: u64) -> u64 {
        self.non_bayesian + n_pass * self.bayesian
    }
}

pub fn cached_cost(graph: &NetworkGraph) -> Result<CachedCost, FlopError> {
    let report = count_flops(graph)?;
    let parts = split_components(graph);
    let sum = |set: &BTreeSet<NodeId>| set.iter().map(|id| report.per_layer[id]).sum();
    Ok(CachedCost {
        non_bayesian: sum(&parts.non_bayesian),
        bayesian: sum(&parts.bayesian),
    })
}

/// FLOPs spent when inference stops at exit `i` (0-based): every node
/// needed by exits `0..=i`, stochastic ones `n_pass` times.
pub fn exit_cost_table(graph: &NetworkGraph, n_pass: u64) -> Result<Vec<u64>, FlopError> {
    let report = count_flops(graph)?;
    let parts = split_components(graph);
    let mut needed = BTreeSet::new();
    let mut table = Vec::with_capacity(graph.n_exit());
    for &e in graph.exits() {
        needed.extend(graph.ancestors(e));
        let cost = needed
            .iter()
            .map(|id| {
                let f = report.per_layer[id];
                if parts.bayesian.contains(id) {
                    n_pass * f
                } else {
                    f
                }
            })
            .sum();
        table.push(cost);
    }
    Ok(table)
}
