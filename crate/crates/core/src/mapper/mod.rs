//! Mapping of Monte-Carlo passes onto hardware engines with an analytic
//! latency/resource model.
//!
//! Cost model, per layer with reuse factor `R`:
//! - weighted: `ceil(mults_per_output / R)` multipliers,
//!   `outputs * R + 8` cycles;
//! - other layers: no multipliers, `outputs + 8` cycles; the input is free.
//!
//! The deterministic backbone runs once, the cached boundary tensors are
//! cloned at one element per cycle, then each engine processes its passes
//! back to back: `ceil(n_pass / E)` rounds of the engine latency.

mod sim;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::flops::{passes, FlopError};
use crate::netir::{LayerKind, LayerNode, NetworkGraph, NodeId};
use crate::transform::{split_components, Components};

pub use sim::simulate;

/// Pipeline fill cycles charged to every layer.
pub const PIPELINE_DEPTH: u64 = 8;
/// Default datapath width when a layer carries no fixed-point annotation.
pub const DEFAULT_BITS: u64 = 32;
pub const LUT_PER_DSP: u64 = 120;
pub const LUT_PER_STREAM_BIT: u64 = 2;
pub const FF_PER_DSP: u64 = 90;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("graph has no dropout layers, so there is nothing to replicate")]
    NoBayesianComponent,
    #[error("{n_sample} samples cannot be split evenly over {n_exit} exits")]
    IndivisibleSamples { n_sample: u64, n_exit: u64 },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("invalid device profile: {0}")]
    InvalidDevice(String),
    #[error("node {0} has no inferred shape")]
    ShapeMissing(NodeId),
}

impl From<FlopError> for MapError {
    fn from(e: FlopError) -> Self {
        match e {
            FlopError::IndivisibleSamples { n_sample, n_exit } => MapError::IndivisibleSamples { n_sample, n_exit },
            FlopError::ShapeMissing(id) => MapError::ShapeMissing(id),
            FlopError::ZeroCount => MapError::InvalidStrategy("sample and exit counts must be >= 1".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub dsp: u64,
    pub bram_kb: u64,
    pub lut: u64,
    pub ff: u64,
    pub clock_mhz: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), MapError> {
        for (field, v) in [
            ("dsp", self.dsp),
            ("bram_kb", self.bram_kb),
            ("lut", self.lut),
            ("ff", self.ff),
        ] {
            if v == 0 {
                return Err(MapError::InvalidDevice(format!("{field} must be > 0")));
            }
        }
        if !(self.clock_mhz > 0.0 && self.clock_mhz.is_finite()) {
            return Err(MapError::InvalidDevice("clock_mhz must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let d: Self = serde_json::from_str(text).map_err(|e| MapError::InvalidDevice(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    /// A device large enough for every plan.
    pub fn unlimited() -> Self {
        Self {
            name: "unlimited".into(),
            dsp: u64::MAX,
            bram_kb: u64::MAX,
            lut: u64::MAX,
            ff: u64::MAX,
            clock_mhz: 200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// One engine per pass.
    Spatial,
    /// One shared engine.
    Temporal,
    /// `E` engines, passes assigned round-robin.
    Mixed(usize),
}

impl Strategy {
    pub fn engines(&self, n_pass: usize) -> usize {
        match *self {
            Strategy::Spatial => n_pass,
            Strategy::Temporal => 1,
            Strategy::Mixed(e) => e,
        }
    }

    /// Sort key used when ranking otherwise equal mappings.
    pub fn rank(&self) -> (u8, usize) {
        match *self {
            Strategy::Spatial => (0, 0),
            Strategy::Temporal => (1, 0),
            Strategy::Mixed(e) => (2, e),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Spatial => write!(f, "spatial"),
            Strategy::Temporal => write!(f, "temporal"),
            Strategy::Mixed(e) => write!(f, "mixed:{e}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spatial" => Ok(Strategy::Spatial),
            "temporal" => Ok(Strategy::Temporal),
            _ => s
                .strip_prefix("mixed:")
                .and_then(|e| e.parse().ok())
                .filter(|&e: &usize| e >= 1)
                .map(Strategy::Mixed)
                .ok_or_else(|| MapError::InvalidStrategy(format!("`{s}` (expected spatial, temporal or mixed:E)"))),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Requested reuse factors; resolved per layer to a divisor of its
/// multiplications per output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReusePolicy {
    Uniform(usize),
    PerLayer {
        default: usize,
        layers: BTreeMap<NodeId, usize>,
    },
}

impl Default for ReusePolicy {
    fn default() -> Self {
        ReusePolicy::Uniform(1)
    }
}

impl ReusePolicy {
    pub fn requested(&self, id: NodeId) -> usize {
        match self {
            ReusePolicy::Uniform(r) => *r,
            ReusePolicy::PerLayer { default, layers } => layers.get(&id).copied().unwrap_or(*default),
        }
    }
}

/// Divisor of `n` closest to `r`; ties go to the smaller divisor.
pub fn nearest_divisor(n: usize, r: usize) -> usize {
    let n = n.max(1);
    (1..=n)
        .filter(|d| n.is_multiple_of(*d))
        .min_by_key(|&d| (d.abs_diff(r), d))
        .expect("1 divides n")
}

/// Multiplications per output of a weighted layer.
pub fn mults_per_output(node: &LayerNode) -> Option<usize> {
    node.fan_in()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineAssignment {
    pub id: usize,
    pub passes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub strategy: Strategy,
    pub n_pass: usize,
    pub engines: Vec<EngineAssignment>,
    /// Resolved reuse factor of every weighted layer.
    pub reuse: BTreeMap<NodeId, usize>,
    /// Elements of the cached boundary tensors, one copy per pass.
    pub clone_buffer: usize,
}

impl MappingPlan {
    pub fn n_engines(&self) -> usize {
        self.engines.len()
    }

    /// Largest number of passes assigned to one engine.
    pub fn rounds(&self) -> usize {
        self.engines.iter().map(|e| e.passes.len()).max().unwrap_or(0)
    }
}

fn assign_round_robin(n_pass: usize, engines: usize) -> Vec<EngineAssignment> {
    (0..engines)
        .map(|id| EngineAssignment {
            id,
            passes: (id..n_pass).step_by(engines).collect(),
        })
        .collect()
}

pub fn plan(
    graph: &NetworkGraph,
    n_sample: usize,
    strategy: Strategy,
    reuse: &ReusePolicy,
) -> Result<MappingPlan, MapError> {
    let parts = split_components(graph);
    if parts.bayesian.is_empty() {
        return Err(MapError::NoBayesianComponent);
    }
    let n_pass = passes(n_sample as u64, graph.n_exit() as u64)? as usize;
    let engines = strategy.engines(n_pass);
    if engines == 0 || engines > n_pass {
        return Err(MapError::InvalidStrategy(format!(
            "{strategy} needs 1..={n_pass} engines"
        )));
    }
    let mut factors = BTreeMap::new();
    for node in graph.nodes().iter().filter(|n| n.kind.is_weighted()) {
        let per_out = mults_per_output(node).ok_or(MapError::ShapeMissing(node.id))?;
        factors.insert(node.id, nearest_divisor(per_out, reuse.requested(node.id).max(1)));
    }
    Ok(MappingPlan {
        strategy,
        n_pass,
        engines: assign_round_robin(n_pass, engines),
        reuse: factors,
        clone_buffer: parts.boundary_elements(graph) * n_pass,
    })
}

/// Multipliers and cycles of one layer under reuse factor `reuse`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub dsp: u64,
    pub cycles: u64,
}

pub fn layer_cost(node: &LayerNode, reuse: usize) -> Result<LayerCost, MapError> {
    let outputs = node.output_shape.ok_or(MapError::ShapeMissing(node.id))?.numel() as u64;
    Ok(match node.kind {
        LayerKind::Input => LayerCost { dsp: 0, cycles: 0 },
        LayerKind::Conv2D { .. } | LayerKind::Dense { .. } => {
            let per_out = mults_per_output(node).ok_or(MapError::ShapeMissing(node.id))? as u64;
            let r = reuse.max(1) as u64;
            LayerCost {
                dsp: per_out.div_ceil(r),
                cycles: outputs * r + PIPELINE_DEPTH,
            }
        }
        _ => LayerCost {
            dsp: 0,
            cycles: outputs + PIPELINE_DEPTH,
        },
    })
}

pub(crate) fn node_bits(node: &LayerNode) -> u64 {
    node.quant.map_or(DEFAULT_BITS, |q| q.format.total_bits as u64)
}

fn stream_bits(node: &LayerNode) -> u64 {
    match node.kind {
        LayerKind::Input => 0,
        _ => node.output_shape.map_or(0, |s| s.channels as u64) * node_bits(node),
    }
}

fn weight_bits(node: &LayerNode) -> u64 {
    node.weight_lens().map_or(0, |(k, b)| (k + b) as u64) * node_bits(node)
}

/// Per-layer costs and totals of one component.
#[derive(Debug, Clone, Default)]
pub(crate) struct ComponentCost {
    pub layers: Vec<(NodeId, LayerCost)>,
    pub cycles: u64,
    pub dsp: u64,
    pub weight_bits: u64,
    pub stream_bits: u64,
}

pub(crate) fn component_cost(
    graph: &NetworkGraph,
    ids: &BTreeSet<NodeId>,
    reuse: &BTreeMap<NodeId, usize>,
) -> Result<ComponentCost, MapError> {
    let mut c = ComponentCost::default();
    for id in graph.topo_order().into_iter().filter(|id| ids.contains(id)) {
        let node = graph.node(id).expect("ordered ids exist");
        let cost = layer_cost(node, reuse.get(&id).copied().unwrap_or(1))?;
        c.cycles += cost.cycles;
        c.dsp += cost.dsp;
        c.weight_bits += weight_bits(node);
        c.stream_bits += stream_bits(node);
        c.layers.push((id, cost));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineEstimate {
    pub id: usize,
    pub passes: usize,
    pub busy_cycles: u64,
    pub dsp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwEstimate {
    pub latency_cycles: u64,
    pub latency_ms: f64,
    pub backbone_cycles: u64,
    pub clone_cycles: u64,
    pub bayesian_cycles: u64,
    /// Latency of one pass through an engine.
    pub engine_cycles: u64,
    pub dsp: u64,
    pub bram_kb: u64,
    pub lut: u64,
    pub ff: u64,
    pub per_engine: Vec<EngineEstimate>,
}

pub(crate) fn boundary_bits(graph: &NetworkGraph, parts: &Components) -> u64 {
    parts
        .boundary(graph)
        .iter()
        .filter_map(|id| graph.node(*id))
        .map(|n| n.output_shape.map_or(0, |s| s.numel() as u64) * node_bits(n))
        .sum()
}

pub fn cycles_to_ms(cycles: u64, clock_mhz: f64) -> f64 {
    cycles as f64 / (clock_mhz * 1e3)
}

pub fn estimate(plan: &MappingPlan, graph: &NetworkGraph, device: &DeviceProfile) -> Result<HwEstimate, MapError> {
    let parts = split_components(graph);
    let backbone = component_cost(graph, &parts.non_bayesian, &plan.reuse)?;
    let engine = component_cost(graph, &parts.bayesian, &plan.reuse)?;
    let e = plan.n_engines() as u64;
    let clone_cycles = plan.clone_buffer as u64;
    let bayesian_cycles = plan.rounds() as u64 * engine.cycles;
    let latency_cycles = backbone.cycles + clone_cycles + bayesian_cycles;
    let dsp = backbone.dsp + e * engine.dsp;
    let clone_bits = boundary_bits(graph, &parts) * plan.n_pass as u64;
    let bram_bytes = (backbone.weight_bits + e * engine.weight_bits + clone_bits).div_ceil(8);
    let stream = backbone.stream_bits + e * engine.stream_bits;
    Ok(HwEstimate {
        latency_cycles,
        latency_ms: cycles_to_ms(latency_cycles, device.clock_mhz),
        backbone_cycles: backbone.cycles,
        clone_cycles,
        bayesian_cycles,
        engine_cycles: engine.cycles,
        dsp,
        bram_kb: bram_bytes.div_ceil(1024),
        lut: LUT_PER_DSP * dsp + LUT_PER_STREAM_BIT * stream,
        ff: FF_PER_DSP * dsp + clone_bits.div_ceil(8),
        per_engine: plan
            .engines
            .iter()
            .map(|a| EngineEstimate {
                id: a.id,
                passes: a.passes.len(),
                busy_cycles: a.passes.len() as u64 * engine.cycles,
                dsp: engine.dsp,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub resource: &'static str,
    pub demand: u64,
    pub capacity: u64,
    /// `100 * (demand - capacity) / capacity`.
    pub overage_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub violations: Vec<Violation>,
}

impl FitReport {
    pub fn fits(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_fit(est: &HwEstimate, device: &DeviceProfile) -> FitReport {
    let violations = [
        ("dsp", est.dsp, device.dsp),
        ("bram_kb", est.bram_kb, device.bram_kb),
        ("lut", est.lut, device.lut),
        ("ff", est.ff, device.ff),
    ]
    .into_iter()
    .filter(|&(_, demand, cap)| demand > cap)
    .map(|(resource, demand, capacity)| Violation {
        resource,
        demand,
        capacity,
        overage_pct: 100.0 * (demand - capacity) as f64 / capacity as f64,
    })
    .collect();
    FitReport { violations }
}

/// Every mapping strategy worth trying for `n_pass` passes: spatial,
/// temporal and mixed with every proper divisor `1 < E < n_pass`.
pub fn strategy_grid(n_pass: usize) -> Vec<Strategy> {
    let mut s = vec![Strategy::Spatial, Strategy::Temporal];
    s.extend((2..n_pass).filter(|e| n_pass.is_multiple_of(*e)).map(Strategy::Mixed));
    s
}
