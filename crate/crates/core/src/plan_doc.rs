//! Hardware-plan documents: everything a synthesis backend needs to build
//! the accelerator, bound to the exact graph it was derived from.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mapper::{check_fit, estimate, simulate, DeviceProfile, HwEstimate, MapError, MappingPlan, Violation};
use crate::netir::{save_graph, to_canonical_string, FixedPointFormat, NetworkGraph, NodeId};
use crate::transform::split_components;

pub const TOOLKIT_VERSION: &str = concat!("mebnn ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan does not fit device: {}", describe(.0))]
    DoesNotFit(Vec<Violation>),
    #[error("graph hash mismatch: plan expects {expected}, graph is {found}")]
    HashMismatch { expected: String, found: String },
    #[error("embedded {field} differs from a fresh estimate")]
    EstimateMismatch { field: &'static str },
    #[error("malformed plan document: {0}")]
    Parse(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

fn describe(v: &[Violation]) -> String {
    v.iter()
        .map(|v| format!("{} {} > {} (+{:.1}%)", v.resource, v.demand, v.capacity, v.overage_pct))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRef {
    pub name: String,
    pub sha256: String,
    pub n_exit: usize,
    pub n_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPlan {
    pub id: NodeId,
    pub kind: String,
    /// `backbone` or `engine`.
    pub component: String,
    pub reuse: usize,
    pub weight_format: Option<FixedPointFormat>,
    pub activation_format: Option<FixedPointFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwarePlan {
    pub toolkit: String,
    pub root_seed: u64,
    pub graph: GraphRef,
    pub device: DeviceProfile,
    pub mapping: MappingPlan,
    pub layers: Vec<LayerPlan>,
    pub estimate: HwEstimate,
    pub simulated_latency_cycles: u64,
    pub fits: bool,
    pub summary: Vec<String>,
}

/// Hex SHA-256 of the canonical graph document.
pub fn graph_hash(graph: &NetworkGraph) -> String {
    hex::encode(Sha256::digest(save_graph(graph).as_bytes()))
}

/// Builds the plan document. Fails with [`PlanError::DoesNotFit`] when the
/// estimate exceeds the device, unless `force`.
pub fn emit_plan(
    graph: &NetworkGraph,
    plan: &MappingPlan,
    device: &DeviceProfile,
    root_seed: u64,
    force: bool,
) -> Result<HardwarePlan, PlanError> {
    device.validate()?;
    let est = estimate(plan, graph, device)?;
    let fit = check_fit(&est, device);
    if !fit.fits() && !force {
        return Err(PlanError::DoesNotFit(fit.violations));
    }
    let sim = simulate(plan, graph, device)?;
    let parts = split_components(graph);
    let layers = graph
        .topo_order()
        .into_iter()
        .filter_map(|id| graph.node(id))
        .filter(|n| !matches!(n.kind, crate::netir::LayerKind::Input))
        .map(|n| LayerPlan {
            id: n.id,
            kind: n.kind.name().to_string(),
            component: if parts.bayesian.contains(&n.id) {
                "engine"
            } else {
                "backbone"
            }
            .to_string(),
            reuse: plan.reuse.get(&n.id).copied().unwrap_or(1),
            weight_format: n
                .quant
                .filter(|q| q.scope.weights() && n.kind.is_weighted())
                .map(|q| q.format),
            activation_format: n.quant.filter(|q| q.scope.activations()).map(|q| q.format),
        })
        .collect();
    let summary = vec![
        format!(
            "graph {} ({} exits, {} samples, {} passes)",
            graph.name(),
            graph.n_exit(),
            plan.n_pass * graph.n_exit(),
            plan.n_pass
        ),
        format!(
            "mapping {} with {} engine(s) over {} round(s)",
            plan.strategy,
            plan.n_engines(),
            plan.rounds()
        ),
        format!(
            "latency {} cycles = backbone {} + clone {} + bayesian {} ({:.6} ms at {} MHz)",
            est.latency_cycles,
            est.backbone_cycles,
            est.clone_cycles,
            est.bayesian_cycles,
            est.latency_ms,
            device.clock_mhz
        ),
        format!(
            "resources dsp {}/{} bram_kb {}/{} lut {}/{} ff {}/{}",
            est.dsp, device.dsp, est.bram_kb, device.bram_kb, est.lut, device.lut, est.ff, device.ff
        ),
        if fit.fits() {
            format!("fits {}", device.name)
        } else {
            format!("forced: exceeds {} ({})", device.name, describe(&fit.violations))
        },
    ];
    Ok(HardwarePlan {
        toolkit: TOOLKIT_VERSION.to_string(),
        root_seed,
        graph: GraphRef {
            name: graph.name().to_string(),
            sha256: graph_hash(graph),
            n_exit: graph.n_exit(),
            n_sample: plan.n_pass * graph.n_exit(),
        },
        device: device.clone(),
        mapping: plan.clone(),
        layers,
        estimate: est,
        simulated_latency_cycles: sim.latency_cycles,
        fits: fit.fits(),
        summary,
    })
}

impl HardwarePlan {
    /// Canonical text: sorted keys, fixed indentation, trailing newline.
    pub fn to_document(&self) -> String {
        to_canonical_string(&serde_json::to_value(self).expect("plan serializes"))
    }

    pub fn from_document(text: &str) -> Result<Self, PlanError> {
        serde_json::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))
    }

    /// Checks the graph hash, then re-runs the estimate and the simulator on
    /// the embedded plan and compares every figure.
    pub fn verify(&self, graph: &NetworkGraph) -> Result<(), PlanError> {
        let found = graph_hash(graph);
        if found != self.graph.sha256 {
            return Err(PlanError::HashMismatch {
                expected: self.graph.sha256.clone(),
                found,
            });
        }
        let est = estimate(&self.mapping, graph, &self.device)?;
        if est != self.estimate {
            return Err(PlanError::EstimateMismatch { field: "estimate" });
        }
        if simulate(&self.mapping, graph, &self.device)?.latency_cycles != self.simulated_latency_cycles {
            return Err(PlanError::EstimateMismatch {
                field: "simulated_latency_cycles",
            });
        }
        if check_fit(&est, &self.device).fits() != self.fits {
            return Err(PlanError::EstimateMismatch { field: "fits" });
        }
        Ok(())
    }
}
