use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Constraints, DesignPoint, DseError, Miss, NearMiss, PointMetrics};
use crate::mapper::{
    check_fit, estimate, plan, strategy_grid, DeviceProfile, HwEstimate, MappingPlan, ReusePolicy, Strategy,
};
use crate::netir::{FixedPointFormat, LayerKind, NetworkGraph, QuantScope};
use crate::runtime::ExitMode;
use crate::trainer::{evaluate, train, Dataset, TrainConfig};
use crate::transform::{annotate_quantization, scale_channels, ChannelFraction};

/// Largest accepted accuracy drop against the full-precision network.
pub const TAU: f64 = 0.005;

/// Supplies accuracy figures for hardware variants of a network.
pub trait AccuracyOracle: Sync {
    /// The network at a reduced channel width, with weights.
    fn variant(&self, graph: &NetworkGraph, fraction: ChannelFraction) -> Result<NetworkGraph, DseError>;
    fn accuracy(&self, graph: &NetworkGraph) -> Result<f64, DseError>;
}

/// Retrains narrowed networks and measures ensemble accuracy on the
/// validation split (the test split when there is none).
pub struct DatasetOracle<'a> {
    pub dataset: &'a Dataset,
    pub train: TrainConfig,
    pub n_sample: usize,
    pub seed: u64,
}

impl AccuracyOracle for DatasetOracle<'_> {
    fn variant(&self, graph: &NetworkGraph, fraction: ChannelFraction) -> Result<NetworkGraph, DseError> {
        if fraction == ChannelFraction::Full {
            return Ok(graph.clone());
        }
        let narrow = scale_channels(graph, fraction)?;
        Ok(train(&narrow, self.dataset, &self.train)?.graph)
    }

    fn accuracy(&self, graph: &NetworkGraph) -> Result<f64, DseError> {
        let split = if self.dataset.val.is_empty() {
            &self.dataset.test
        } else {
            &self.dataset.val
        };
        Ok(evaluate(graph, split, self.n_sample, self.seed)?.ensemble().accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase3Grid {
    pub bitwidths: Vec<u8>,
    pub channel_fractions: Vec<ChannelFraction>,
    pub reuse_factors: Vec<usize>,
    /// Defaults to spatial, temporal and every mixed divisor of `n_pass`.
    pub strategies: Option<Vec<Strategy>>,
}

impl Default for Phase3Grid {
    fn default() -> Self {
        Self {
            bitwidths: vec![4, 6, 8, 16],
            channel_fractions: ChannelFraction::ALL.to_vec(),
            reuse_factors: vec![1, 2, 4, 8, 16],
            strategies: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HwCandidate {
    pub bitwidth: u8,
    pub channel_fraction: ChannelFraction,
    pub reuse: usize,
    pub strategy: Strategy,
    pub accuracy: f64,
    pub accuracy_ok: bool,
    pub fits: bool,
    pub estimate: HwEstimate,
}

impl HwCandidate {
    fn order(&self, other: &Self) -> std::cmp::Ordering {
        let key = |c: &Self| {
            (
                c.estimate.latency_cycles,
                c.estimate.dsp,
                c.estimate.bram_kb,
                c.estimate.lut,
                c.estimate.ff,
                c.bitwidth,
                c.strategy.rank(),
                c.channel_fraction,
                c.reuse,
            )
        };
        key(self).cmp(&key(other))
    }
}

#[derive(Debug, Clone)]
pub struct Phase3Result {
    pub reference_accuracy: f64,
    pub candidates: Vec<HwCandidate>,
    pub best: usize,
    /// The chosen network, narrowed and annotated.
    pub graph: NetworkGraph,
    pub plan: MappingPlan,
}

impl Phase3Result {
    pub fn selected(&self) -> &HwCandidate {
        &self.candidates[self.best]
    }
}

fn quantized(graph: &NetworkGraph, bits: u8) -> Result<NetworkGraph, DseError> {
    if bits >= 32 {
        return Ok(graph.clone());
    }
    let fmt = FixedPointFormat::with_total_bits(bits).map_err(|e| DseError::Config(e.to_string()))?;
    Ok(annotate_quantization(graph, fmt, QuantScope::Both))
}

fn candidate_misses(c: &HwCandidate, reference: f64, device: &DeviceProfile, constraints: &Constraints) -> Vec<Miss> {
    let mut misses = Vec::new();
    if !c.accuracy_ok {
        misses.push(Miss {
            constraint: "accuracy_drop",
            value: c.accuracy,
            limit: reference - TAU,
        });
    }
    if let Some(min) = constraints.min_accuracy.filter(|&m| c.accuracy < m) {
        misses.push(Miss {
            constraint: "min_accuracy",
            value: c.accuracy,
            limit: min,
        });
    }
    for v in check_fit(&c.estimate, device).violations {
        misses.push(Miss {
            constraint: v.resource,
            value: v.demand as f64,
            limit: v.capacity as f64,
        });
    }
    if let Some(max) = constraints
        .max_latency_cycles
        .filter(|&m| c.estimate.latency_cycles > m)
    {
        misses.push(Miss {
            constraint: "max_latency_cycles",
            value: c.estimate.latency_cycles as f64,
            limit: max as f64,
        });
    }
    misses
}

fn as_point(graph: &NetworkGraph, c: &HwCandidate) -> DesignPoint {
    let keep_rate = graph
        .nodes()
        .iter()
        .find_map(|n| match n.kind {
            LayerKind::McDropout { keep_rate, .. } => Some(keep_rate),
            _ => None,
        })
        .unwrap_or(1.0);
    let mcd_layers = graph
        .path_to(graph.final_exit())
        .iter()
        .filter(|&&id| graph.node(id).is_some_and(|n| n.kind.is_mcd()))
        .count();
    DesignPoint {
        n_exit: graph.n_exit(),
        keep_rate,
        mcd_layers_per_exit: mcd_layers,
        confidence_threshold: None,
        exit_mode: ExitMode::CumulativeEnsemble,
        bitwidth: c.bitwidth,
        channel_fraction: c.channel_fraction,
        strategy: c.strategy,
        reuse: c.reuse,
        metrics: Some(PointMetrics {
            accuracy: c.accuracy,
            accuracy_std: 0.0,
            ece: 0.0,
            ece_std: 0.0,
            static_flops: 0.0,
            expected_flops: 0.0,
            latency_cycles: c.estimate.latency_cycles,
            dsp: c.estimate.dsp,
            bram_kb: c.estimate.bram_kb,
            lut: c.estimate.lut,
            ff: c.estimate.ff,
        }),
    }
}

/// Phase 3: bitwidth, channel width, reuse and mapping search. Variants
/// losing more than [`TAU`] accuracy are rejected; the fitting survivor with
/// the lowest latency wins, then fewer resources, then lower bitwidth.
pub fn phase3_search(
    graph: &NetworkGraph,
    n_sample: usize,
    device: &DeviceProfile,
    constraints: &Constraints,
    grid: &Phase3Grid,
    oracle: &dyn AccuracyOracle,
) -> Result<Phase3Result, DseError> {
    device.validate()?;
    if grid.bitwidths.is_empty() || grid.channel_fractions.is_empty() || grid.reuse_factors.is_empty() {
        return Err(DseError::Config("phase-3 grids must be nonempty".into()));
    }
    let reference_accuracy = oracle.accuracy(graph)?;
    let mut fractions = grid.channel_fractions.clone();
    fractions.sort();
    fractions.dedup();
    let mut bitwidths = grid.bitwidths.clone();
    bitwidths.sort_unstable();
    bitwidths.dedup();
    let mut reuses = grid.reuse_factors.clone();
    reuses.sort_unstable();
    reuses.dedup();

    let variants: Vec<NetworkGraph> = fractions
        .par_iter()
        .map(|&f| oracle.variant(graph, f))
        .collect::<Result<_, _>>()?;
    let quantized_variants: Vec<(usize, u8, NetworkGraph, f64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(vi, _)| bitwidths.iter().map(move |&b| (vi, b)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(vi, b)| {
            let q = quantized(&variants[vi], b)?;
            let acc = oracle.accuracy(&q)?;
            Ok((vi, b, q, acc))
        })
        .collect::<Result<_, DseError>>()?;

    let n_pass = n_sample / graph.n_exit().max(1);
    let strategies = grid.strategies.clone().unwrap_or_else(|| strategy_grid(n_pass));
    let mut candidates = Vec::new();
    let mut plans = Vec::new();
    for (vi, bits, q, acc) in &quantized_variants {
        for &reuse in &reuses {
            for &strategy in &strategies {
                let p = match plan(q, n_sample, strategy, &ReusePolicy::Uniform(reuse)) {
                    Ok(p) => p,
                    Err(crate::mapper::MapError::InvalidStrategy(_)) => continue,
                    Err(e) => return Err(e.into()),
                };
                let est = estimate(&p, q, device)?;
                candidates.push(HwCandidate {
                    bitwidth: *bits,
                    channel_fraction: fractions[*vi],
                    reuse,
                    strategy,
                    accuracy: *acc,
                    accuracy_ok: *acc >= reference_accuracy - TAU,
                    fits: check_fit(&est, device).fits(),
                    estimate: est,
                });
                plans.push((q.clone(), p));
            }
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].order(&candidates[b]));
    let candidates: Vec<HwCandidate> = order.iter().map(|&i| candidates[i].clone()).collect();
    let mut plans: Vec<Option<(NetworkGraph, MappingPlan)>> = {
        let mut slots: Vec<Option<(NetworkGraph, MappingPlan)>> = plans.into_iter().map(Some).collect();
        order.iter().map(|&i| slots[i].take()).collect()
    };

    let best = candidates
        .iter()
        .position(|c| candidate_misses(c, reference_accuracy, device, constraints).is_empty());
    let Some(best) = best else {
        let nearest = candidates
            .iter()
            .map(|c| {
                let misses = candidate_misses(c, reference_accuracy, device, constraints);
                let score: f64 = misses.iter().map(|m| m.severity()).sum();
                (score, c, misses)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c, misses)| NearMiss {
                point: as_point(graph, c),
                misses,
            });
        return Err(DseError::EmptyFeasibleSet {
            evaluated: candidates.len(),
            nearest: nearest.map(Box::new),
        });
    };
    let (chosen_graph, chosen_plan) = plans[best].take().expect("one plan per candidate");
    Ok(Phase3Result {
        reference_accuracy,
        candidates,
        best,
        graph: chosen_graph,
        plan: chosen_plan,
    })
}
