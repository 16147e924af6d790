//! Grid-search design-space exploration.
//!
//! Phase 1 trains and scores algorithmic variants (exit count, dropout
//! placement and rate, confidence exiting); phase 3 searches bitwidth,
//! channel width, reuse factors and mapping for one chosen variant.
//! Rankings are lexicographic over a priority list, with the knob tuple as
//! the final tie-break, so results do not depend on grid enumeration order.

mod export;
mod phase3;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flops::{cached_cost, count_flops, exit_cost_table, FlopError};
use crate::mapper::{
    component_cost, estimate, plan, DeviceProfile, MapError, ReusePolicy, Strategy, FF_PER_DSP, LUT_PER_DSP,
    LUT_PER_STREAM_BIT,
};
use crate::metrics::{accuracy, ece, MetricsError};
use crate::netir::{LayerKind, NetworkGraph, NodeId};
use crate::runtime::{decide_exit, ExitMode};
use crate::trainer::{evaluate, train, Dataset, TrainConfig, TrainError};
use crate::transform::{
    insert_exits, insert_mcd, split_components, ChannelFraction, ExitPolicy, McdPolicy, TransformError,
};

pub use export::{export_hw_candidates, export_results, RESULT_COLUMNS};
pub use phase3::{phase3_search, AccuracyOracle, DatasetOracle, HwCandidate, Phase3Grid, Phase3Result, TAU};

#[derive(Debug, Error)]
pub enum DseError {
    #[error("no feasible design point among {evaluated} evaluated{}", nearest_text(.nearest))]
    EmptyFeasibleSet {
        evaluated: usize,
        nearest: Option<Box<NearMiss>>,
    },
    #[error("invalid exploration config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Flops(#[from] FlopError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn nearest_text(n: &Option<Box<NearMiss>>) -> String {
    match n {
        None => String::new(),
        Some(n) => {
            let misses: Vec<String> = n
                .misses
                .iter()
                .map(|m| format!("{} = {} (limit {})", m.constraint, m.value, m.limit))
                .collect();
            format!("; nearest miss {} violates {}", n.point, misses.join(", "))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Calibration,
    Flops,
    Latency,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constraints {
    pub min_accuracy: Option<f64>,
    pub max_ece: Option<f64>,
    /// Expected FLOPs as a fraction of the single-exit baseline.
    pub max_flops: Option<f64>,
    pub max_latency_cycles: Option<u64>,
    pub device: Option<DeviceProfile>,
}

impl Constraints {
    pub fn is_empty(&self) -> bool {
        *self == Constraints::default()
    }
}

pub fn validate_priority(priority: &[Metric]) -> Result<(), DseError> {
    if priority.is_empty() {
        return Err(DseError::Config("priority list is empty".into()));
    }
    for (i, m) in priority.iter().enumerate() {
        if priority[..i].contains(m) {
            return Err(DseError::Config(format!("priority lists {m:?} twice")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub ece: f64,
    pub ece_std: f64,
    /// Cost of all passes as a fraction of the single-exit baseline.
    pub static_flops: f64,
    /// Mean cost under confidence exiting, same normalisation.
    pub expected_flops: f64,
    pub latency_cycles: u64,
    pub dsp: u64,
    pub bram_kb: u64,
    pub lut: u64,
    pub ff: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub n_exit: usize,
    pub keep_rate: f64,
    pub mcd_layers_per_exit: usize,
    pub confidence_threshold: Option<f64>,
    pub exit_mode: ExitMode,
    pub bitwidth: u8,
    pub channel_fraction: ChannelFraction,
    pub strategy: Strategy,
    pub reuse: usize,
    pub metrics: Option<PointMetrics>,
}

impl std::fmt::Display for DesignPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[exits {} mcd {} keep {} threshold {} {} bits {} channels {} {} reuse {}]",
            self.n_exit,
            self.mcd_layers_per_exit,
            self.keep_rate,
            self.confidence_threshold.map_or("none".into(), |t| t.to_string()),
            self.exit_mode.label(),
            self.bitwidth,
            self.channel_fraction.label(),
            self.strategy,
            self.reuse
        )
    }
}

/// Total order on knob values, used as the last ranking tie-break.
pub fn knob_order(a: &DesignPoint, b: &DesignPoint) -> Ordering {
    let thr = |p: &DesignPoint| p.confidence_threshold.map(f64::to_bits);
    a.n_exit
        .cmp(&b.n_exit)
        .then(a.mcd_layers_per_exit.cmp(&b.mcd_layers_per_exit))
        .then(a.keep_rate.total_cmp(&b.keep_rate))
        .then(thr(a).cmp(&thr(b)))
        .then(a.exit_mode.cmp(&b.exit_mode))
        .then(a.bitwidth.cmp(&b.bitwidth))
        .then(a.channel_fraction.cmp(&b.channel_fraction))
        .then(a.strategy.rank().cmp(&b.strategy.rank()))
        .then(a.reuse.cmp(&b.reuse))
}

fn metric_order(m: Metric, a: &PointMetrics, b: &PointMetrics) -> Ordering {
    match m {
        Metric::Accuracy => b.accuracy.total_cmp(&a.accuracy),
        Metric::Calibration => a.ece.total_cmp(&b.ece),
        Metric::Flops => a.expected_flops.total_cmp(&b.expected_flops),
        Metric::Latency => a.latency_cycles.cmp(&b.latency_cycles),
    }
}

/// Lexicographic comparison by `priority`, best first.
pub fn compare(priority: &[Metric], a: &DesignPoint, b: &DesignPoint) -> Ordering {
    let (ma, mb) = (
        a.metrics.as_ref().expect("evaluated"),
        b.metrics.as_ref().expect("evaluated"),
    );
    priority
        .iter()
        .fold(Ordering::Equal, |o, &m| o.then_with(|| metric_order(m, ma, mb)))
        .then_with(|| knob_order(a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Miss {
    pub constraint: &'static str,
    pub value: f64,
    pub limit: f64,
}

impl Miss {
    /// Excess relative to the limit.
    fn severity(&self) -> f64 {
        (self.value - self.limit).abs() / self.limit.abs().max(1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearMiss {
    pub point: DesignPoint,
    pub misses: Vec<Miss>,
}

pub fn violations(point: &DesignPoint, c: &Constraints) -> Vec<Miss> {
    let m = point.metrics.as_ref().expect("evaluated");
    let mut out = Vec::new();
    if let Some(min) = c.min_accuracy.filter(|&min| m.accuracy < min) {
        out.push(Miss {
            constraint: "min_accuracy",
            value: m.accuracy,
            limit: min,
        });
    }
    if let Some(max) = c.max_ece.filter(|&max| m.ece > max) {
        out.push(Miss {
            constraint: "max_ece",
            value: m.ece,
            limit: max,
        });
    }
    if let Some(max) = c.max_flops.filter(|&max| m.expected_flops > max) {
        out.push(Miss {
            constraint: "max_flops",
            value: m.expected_flops,
            limit: max,
        });
    }
    if let Some(max) = c.max_latency_cycles.filter(|&max| m.latency_cycles > max) {
        out.push(Miss {
            constraint: "max_latency_cycles",
            value: m.latency_cycles as f64,
            limit: max as f64,
        });
    }
    if let Some(d) = &c.device {
        for (name, demand, cap) in [
            ("dsp", m.dsp, d.dsp),
            ("bram_kb", m.bram_kb, d.bram_kb),
            ("lut", m.lut, d.lut),
            ("ff", m.ff, d.ff),
        ] {
            if demand > cap {
                out.push(Miss {
                    constraint: name,
                    value: demand as f64,
                    limit: cap as f64,
                });
            }
        }
    }
    out
}

/// Indices of the feasible points, best first.
pub fn rank(points: &[DesignPoint], constraints: &Constraints, priority: &[Metric]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len())
        .filter(|&i| violations(&points[i], constraints).is_empty())
        .collect();
    idx.sort_by(|&a, &b| compare(priority, &points[a], &points[b]));
    idx
}

/// The point closest to feasibility (smallest summed relative excess).
pub fn nearest_miss(points: &[DesignPoint], constraints: &Constraints) -> Option<NearMiss> {
    points
        .iter()
        .map(|p| {
            let misses = violations(p, constraints);
            let score: f64 = misses.iter().map(Miss::severity).sum();
            (score, p, misses)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| knob_order(a.1, b.1)))
        .map(|(_, p, misses)| NearMiss {
            point: p.clone(),
            misses,
        })
}

pub const DEFAULT_KEEP_RATES: [f64; 4] = [0.875, 0.75, 0.625, 0.5];
pub const DEFAULT_THRESHOLDS: [f64; 11] = [0.1, 0.15, 0.25, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Grid {
    pub n_exit: Vec<usize>,
    pub keep_rates: Vec<f64>,
    pub mcd_layers: Vec<usize>,
    /// `None` scores the full ensemble without early exiting.
    pub thresholds: Vec<Option<f64>>,
    pub exit_modes: Vec<ExitMode>,
    /// Training seeds per configuration.
    pub seeds: usize,
    /// Upper bound on trained configurations, taken in knob order.
    pub max_configs: Option<usize>,
}

impl Default for Phase1Grid {
    fn default() -> Self {
        Self {
            n_exit: vec![1, 2, 3],
            keep_rates: DEFAULT_KEEP_RATES.to_vec(),
            mcd_layers: vec![0, 1, 2],
            thresholds: std::iter::once(None).chain(DEFAULT_THRESHOLDS.map(Some)).collect(),
            exit_modes: vec![ExitMode::PerExit, ExitMode::CumulativeEnsemble],
            seeds: 3,
            max_configs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Settings {
    pub grid: Phase1Grid,
    pub train: TrainConfig,
    pub n_sample: usize,
    /// Seed of the Monte-Carlo evaluation.
    pub seed: u64,
}

impl Default for Phase1Settings {
    fn default() -> Self {
        Self {
            grid: Phase1Grid::default(),
            train: TrainConfig::default(),
            n_sample: 6,
            seed: 0,
        }
    }
}

/// One trained architecture of the phase-1 grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchKey {
    pub n_exit: usize,
    pub mcd_layers: usize,
    pub keep_rate: f64,
}

impl ArchKey {
    fn order(&self, other: &Self) -> Ordering {
        self.n_exit
            .cmp(&other.n_exit)
            .then(self.mcd_layers.cmp(&other.mcd_layers))
            .then(self.keep_rate.total_cmp(&other.keep_rate))
    }
}

/// Exit anchors for `n_exit` exits: pooling layers on the backbone, or
/// activations when there are none, evenly spaced from the shallowest.
pub fn exit_policy_for(base: &NetworkGraph, n_exit: usize) -> Result<ExitPolicy, DseError> {
    let path = base.path_to(base.final_exit());
    let on_path = |pred: fn(&LayerKind) -> bool| -> Vec<NodeId> {
        path.iter()
            .copied()
            .filter(|&id| base.node(id).is_some_and(|n| pred(&n.kind)))
            .collect()
    };
    let mut candidates = on_path(|k| matches!(k, LayerKind::MaxPool { .. }));
    if candidates.is_empty() {
        candidates = on_path(|k| matches!(k, LayerKind::ReLU));
    }
    let extra = n_exit.saturating_sub(1);
    if extra > candidates.len() {
        return Err(DseError::Config(format!(
            "{n_exit} exits requested but the base network has {} exit positions",
            candidates.len() + 1
        )));
    }
    let picks = (0..extra)
        .map(|j| candidates[j * candidates.len() / extra.max(1)])
        .collect();
    Ok(ExitPolicy::ExplicitIds(picks))
}

/// Builds the untrained multi-exit dropout network for one architecture.
pub fn build_variant(base: &NetworkGraph, key: &ArchKey) -> Result<NetworkGraph, DseError> {
    let me = insert_exits(base, &exit_policy_for(base, key.n_exit)?)?;
    Ok(insert_mcd(&me, &McdPolicy::new(key.mcd_layers, key.keep_rate))?)
}

/// Latency and resources of the default mapping (spatial, reuse 1). A
/// network without dropout is a single copy run once.
fn default_hw(
    graph: &NetworkGraph,
    n_sample: usize,
    device: &DeviceProfile,
) -> Result<(u64, u64, u64, u64, u64), DseError> {
    if split_components(graph).bayesian.is_empty() {
        let all = graph.nodes().iter().map(|n| n.id).collect();
        let c = component_cost(graph, &all, &BTreeMap::new())?;
        return Ok((
            c.cycles,
            c.dsp,
            c.weight_bits.div_ceil(8).div_ceil(1024),
            LUT_PER_DSP * c.dsp + LUT_PER_STREAM_BIT * c.stream_bits,
            FF_PER_DSP * c.dsp,
        ));
    }
    let p = plan(graph, n_sample, Strategy::Spatial, &ReusePolicy::Uniform(1))?;
    let e = estimate(&p, graph, device)?;
    Ok((e.latency_cycles, e.dsp, e.bram_kb, e.lut, e.ff))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct Phase1Result {
    /// Every evaluated point in knob order.
    pub points: Vec<DesignPoint>,
    /// Feasible points, best first under the requested priority.
    pub ranked: Vec<usize>,
    pub acc_opt: usize,
    pub ece_opt: usize,
    /// FLOPs of one pass of the base network.
    pub baseline_flops: u64,
    /// Trained networks (first seed) per architecture, in knob order.
    pub graphs: Vec<(ArchKey, NetworkGraph)>,
    pub skipped_configs: usize,
}

impl Phase1Result {
    pub fn best(&self) -> &DesignPoint {
        &self.points[self.ranked[0]]
    }

    pub fn graph_for(&self, point: &DesignPoint) -> Option<&NetworkGraph> {
        self.graphs
            .iter()
            .find(|(k, _)| {
                k.n_exit == point.n_exit && k.mcd_layers == point.mcd_layers_per_exit && k.keep_rate == point.keep_rate
            })
            .map(|(_, g)| g)
    }
}

struct Scored {
    accuracy: f64,
    ece: f64,
    expected_flops: f64,
}

/// Scores every (threshold, mode) combination of one trained network from a
/// single batch of Monte-Carlo predictions.
fn score_thresholds(
    graph: &NetworkGraph,
    dataset_split: &crate::trainer::Split,
    settings: &Phase1Settings,
    baseline: f64,
    combos: &[(Option<f64>, ExitMode)],
) -> Result<Vec<Scored>, DseError> {
    let report = evaluate(graph, dataset_split, settings.n_sample, settings.seed)?;
    let n_pass = settings.n_sample / graph.n_exit();
    let costs = exit_cost_table(graph, n_pass as u64)?;
    combos
        .iter()
        .map(|&(threshold, mode)| {
            let mut probs = Vec::with_capacity(report.predictions.len());
            let mut flops = 0u64;
            for p in &report.predictions {
                let (exit, row) = match threshold {
                    Some(t) => decide_exit(p, t, mode),
                    None => (
                        graph.n_exit() - 1,
                        crate::runtime::ensemble(p, graph.n_exit()).expect("valid prefix"),
                    ),
                };
                flops += costs[exit];
                probs.push(row);
            }
            let n = probs.len() as f64;
            Ok(Scored {
                accuracy: accuracy(&probs, &dataset_split.labels)?,
                ece: ece(&probs, &dataset_split.labels, crate::trainer::DEFAULT_BINS)?.ece,
                expected_flops: flops as f64 / n / baseline,
            })
        })
        .collect()
}

/// Phase 1: trains every architecture of the grid (`grid.seeds` seeds each),
/// scores it under every exiting rule and ranks the feasible points.
pub fn phase1_search(
    base: &NetworkGraph,
    dataset: &Dataset,
    settings: &Phase1Settings,
    constraints: &Constraints,
    priority: &[Metric],
) -> Result<Phase1Result, DseError> {
    validate_priority(priority)?;
    let grid = &settings.grid;
    if grid.seeds == 0 {
        return Err(DseError::Config("seeds must be at least 1".into()));
    }
    if base.n_exit() != 1 {
        return Err(DseError::Config("the base network must have a single exit".into()));
    }
    for &n in &grid.n_exit {
        if n == 0 || !settings.n_sample.is_multiple_of(n) {
            return Err(DseError::Config(format!(
                "n_sample {} is not a multiple of n_exit {n}",
                settings.n_sample
            )));
        }
    }
    let split = if dataset.val.is_empty() {
        &dataset.test
    } else {
        &dataset.val
    };
    let device = constraints.device.clone().unwrap_or_else(DeviceProfile::unlimited);
    let baseline_flops = count_flops(base)?.total();

    let mut archs: Vec<ArchKey> = Vec::new();
    for &n_exit in &grid.n_exit {
        for &mcd_layers in &grid.mcd_layers {
            let keeps: Vec<f64> = if mcd_layers == 0 {
                vec![1.0]
            } else {
                grid.keep_rates.clone()
            };
            for keep_rate in keeps {
                let key = ArchKey {
                    n_exit,
                    mcd_layers,
                    keep_rate,
                };
                if !archs.iter().any(|k| k.order(&key) == Ordering::Equal) {
                    archs.push(key);
                }
            }
        }
    }
    archs.sort_by(|a, b| a.order(b));
    // architectures whose dropout layers do not fit are dropped
    let mut buildable = Vec::new();
    let mut skipped = 0;
    for key in archs {
        match build_variant(base, &key) {
            Ok(g) => buildable.push((key, g)),
            Err(DseError::Transform(TransformError::Policy(_))) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if let Some(cap) = grid.max_configs {
        skipped += buildable.len().saturating_sub(cap);
        buildable.truncate(cap);
    }

    let mut modes = grid.exit_modes.clone();
    modes.sort();
    modes.dedup();
    let mut thresholds = grid.thresholds.clone();
    thresholds.sort_by(|a, b| a.map(f64::to_bits).cmp(&b.map(f64::to_bits)));
    thresholds.dedup();
    let combos: Vec<(Option<f64>, ExitMode)> = thresholds
        .iter()
        .flat_map(|&t| match t {
            None => vec![(None, ExitMode::CumulativeEnsemble)],
            Some(_) => modes.iter().map(|&m| (t, m)).collect(),
        })
        .collect();

    let jobs: Vec<(usize, u64)> = (0..buildable.len())
        .flat_map(|a| (0..grid.seeds as u64).map(move |s| (a, s)))
        .collect();
    let trained: Vec<(NetworkGraph, Vec<Scored>)> = jobs
        .par_iter()
        .map(|&(a, s)| -> Result<_, DseError> {
            let cfg = TrainConfig {
                seed: settings.train.seed.wrapping_add(s),
                ..settings.train.clone()
            };
            let g = train(&buildable[a].1, dataset, &cfg)?.graph;
            let scores = score_thresholds(&g, split, settings, baseline_flops as f64, &combos)?;
            Ok((g, scores))
        })
        .collect::<Result<_, _>>()?;

    let mut points = Vec::new();
    let mut graphs = Vec::new();
    for (a, (key, _)) in buildable.iter().enumerate() {
        let runs = &trained[a * grid.seeds..(a + 1) * grid.seeds];
        let g = &runs[0].0;
        let n_pass = settings.n_sample / key.n_exit;
        let static_flops = cached_cost(g)?.total(n_pass as u64) as f64 / baseline_flops as f64;
        let (latency_cycles, dsp, bram_kb, lut, ff) = default_hw(g, settings.n_sample, &device)?;
        for (c, &(threshold, mode)) in combos.iter().enumerate() {
            let accs: Vec<f64> = runs.iter().map(|r| r.1[c].accuracy).collect();
            let eces: Vec<f64> = runs.iter().map(|r| r.1[c].ece).collect();
            let flops: Vec<f64> = runs.iter().map(|r| r.1[c].expected_flops).collect();
            let (accuracy, accuracy_std) = mean_std(&accs);
            let (ece, ece_std) = mean_std(&eces);
            points.push(DesignPoint {
                n_exit: key.n_exit,
                keep_rate: key.keep_rate,
                mcd_layers_per_exit: key.mcd_layers,
                confidence_threshold: threshold,
                exit_mode: mode,
                bitwidth: 32,
                channel_fraction: ChannelFraction::Full,
                strategy: Strategy::Spatial,
                reuse: 1,
                metrics: Some(PointMetrics {
                    accuracy,
                    accuracy_std,
                    ece,
                    ece_std,
                    static_flops,
                    expected_flops: mean_std(&flops).0,
                    latency_cycles,
                    dsp,
                    bram_kb,
                    lut,
                    ff,
                }),
            });
        }
        graphs.push((*key, g.clone()));
    }
    points.sort_by(knob_order);

    let ranked = rank(&points, constraints, priority);
    if ranked.is_empty() {
        return Err(DseError::EmptyFeasibleSet {
            evaluated: points.len(),
            nearest: nearest_miss(&points, constraints).map(Box::new),
        });
    }
    let best_by = |p: &[Metric]| {
        *ranked
            .iter()
            .min_by(|&&a, &&b| compare(p, &points[a], &points[b]))
            .expect("nonempty")
    };
    let acc_opt = best_by(&[Metric::Accuracy, Metric::Calibration, Metric::Flops, Metric::Latency]);
    let ece_opt = best_by(&[Metric::Calibration, Metric::Accuracy, Metric::Flops, Metric::Latency]);
    Ok(Phase1Result {
        points,
        ranked,
        acc_opt,
        ece_opt,
        baseline_flops,
        graphs,
        skipped_configs: skipped,
    })
}
