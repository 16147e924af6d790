use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::layers;
use super::mcd::{apply_mask, deterministic_mask, draw_mask};
use super::{quantize_slice, ExitMode, InferenceOptions, RuntimeError, Tensor};
use crate::flops::{layer_flops, passes};
use crate::netir::{LayerKind, LayerNode, NetworkGraph, NodeId, Weights};
use crate::rng::{item_seed, pass_seed, Rng};
use crate::transform::split_components;

/// A graph prepared for repeated evaluation: topological slots, quantized
/// weight copies and the Bayesian/non-Bayesian split.
#[derive(Debug, Clone)]
pub struct Engine<'g> {
    graph: &'g NetworkGraph,
    order: Vec<NodeId>,
    slot_of: BTreeMap<NodeId, usize>,
    producer: Vec<Option<usize>>,
    weights: Vec<Option<Weights>>,
    bayesian: Vec<bool>,
    exits: Vec<usize>,
    /// Dropout slots in ascending node-id order (the draw order).
    mcd_slots: Vec<usize>,
    options: InferenceOptions,
}

impl<'g> Engine<'g> {
    pub fn new(graph: &'g NetworkGraph, options: InferenceOptions) -> Result<Self, RuntimeError> {
        let order = graph.topo_order();
        let slot_of: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let parts = split_components(graph);
        let mut producer = Vec::with_capacity(order.len());
        let mut weights = Vec::with_capacity(order.len());
        let mut bayesian = Vec::with_capacity(order.len());
        for &id in &order {
            let node = graph.node(id).expect("ordered ids exist");
            if node.output_shape.is_none() {
                return Err(RuntimeError::ShapeMismatch {
                    node: id,
                    expected: "inferred shape".into(),
                    found: "none".into(),
                });
            }
            producer.push(graph.producer(id).map(|p| slot_of[&p]));
            bayesian.push(parts.bayesian.contains(&id));
            let w = if node.kind.is_weighted() {
                let mut w = node.weights.clone().ok_or(RuntimeError::MissingWeights(id))?;
                if let Some(q) = node.quant.filter(|q| q.scope.weights()) {
                    quantize_slice(&mut w.kernel, q.format);
                    quantize_slice(&mut w.bias, q.format);
                }
                Some(w)
            } else {
                None
            };
            weights.push(w);
        }
        let exits = graph.exits().iter().map(|e| slot_of[e]).collect();
        let mcd_slots = graph.mcd_nodes().iter().map(|m| slot_of[m]).collect();
        Ok(Self {
            graph,
            order,
            slot_of,
            producer,
            weights,
            bayesian,
            exits,
            mcd_slots,
            options,
        })
    }

    pub fn graph(&self) -> &NetworkGraph {
        self.graph
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub(crate) fn node_at(&self, slot: usize) -> &LayerNode {
        self.graph.node(self.order[slot]).expect("slot maps to a node")
    }

    pub(crate) fn slot(&self, id: NodeId) -> usize {
        self.slot_of[&id]
    }

    pub(crate) fn producer_slot(&self, slot: usize) -> Option<usize> {
        self.producer[slot]
    }

    pub(crate) fn exit_slots(&self) -> &[usize] {
        &self.exits
    }

    pub(crate) fn mcd_slots(&self) -> &[usize] {
        &self.mcd_slots
    }

    pub(crate) fn weights_at(&self, slot: usize) -> Option<&Weights> {
        self.weights[slot].as_ref()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), RuntimeError> {
        if input.shape != self.graph.input_shape() {
            return Err(RuntimeError::ShapeMismatch {
                node: self.graph.input_id(),
                expected: self.graph.input_shape().to_string(),
                found: input.shape.to_string(),
            });
        }
        Ok(())
    }

    /// Dropout multipliers for pass `pass` of a sample seeded with `seed`,
    /// one vector per dropout slot in draw order.
    pub fn draw_pass_masks(&self, seed: u64, pass: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(pass_seed(seed, pass));
        self.draw_masks(&mut rng)
    }

    /// Draws masks for every dropout slot from `rng`, in draw order.
    pub fn draw_masks(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        self.mcd_slots
            .iter()
            .map(|&s| {
                let node = self.node_at(s);
                let LayerKind::McDropout { keep_rate, granularity } = node.kind else {
                    unreachable!("dropout slot")
                };
                draw_mask(
                    node.output_shape.expect("shapes checked"),
                    keep_rate,
                    granularity,
                    self.options.scaling,
                    rng,
                )
            })
            .collect()
    }

    /// Masks that keep everything and apply only the output scaling.
    pub fn deterministic_masks(&self) -> Vec<Vec<f64>> {
        self.mcd_slots
            .iter()
            .map(|&s| {
                let node = self.node_at(s);
                let LayerKind::McDropout { keep_rate, .. } = node.kind else {
                    unreachable!("dropout slot")
                };
                deterministic_mask(
                    node.output_shape.expect("shapes checked"),
                    keep_rate,
                    self.options.scaling,
                )
            })
            .collect()
    }

    fn mask_index(&self, slot: usize) -> usize {
        self.mcd_slots.iter().position(|&s| s == slot).expect("dropout slot")
    }

    /// Evaluates one node given its input tensor.
    pub(crate) fn eval_slot(&self, slot: usize, input: &Tensor, masks: &[Vec<f64>]) -> Tensor {
        let node = self.node_at(slot);
        let out_shape = node.output_shape.expect("shapes checked");
        let mut out = match node.kind {
            LayerKind::McDropout { .. } => apply_mask(input, &masks[self.mask_index(slot)]),
            ref kind => layers::forward(kind, input, self.weights[slot].as_ref(), out_shape),
        };
        if let Some(q) = node.quant.filter(|q| q.scope.activations()) {
            quantize_slice(&mut out.data, q.format);
        }
        out
    }

    /// Evaluates every node with the given masks; outputs indexed by slot.
    pub fn forward_all(&self, input: &Tensor, masks: &[Vec<f64>]) -> Result<Vec<Tensor>, RuntimeError> {
        self.check_input(input)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.order.len());
        for slot in 0..self.order.len() {
            let src = match self.producer[slot] {
                Some(p) => &values[p],
                None => input,
            };
            let out = self.eval_slot(slot, src, masks);
            values.push(out);
        }
        Ok(values)
    }

    fn exit_outputs(&self, values: &[Tensor]) -> ExitOutputs {
        let mut logits = Vec::with_capacity(self.exits.len());
        let mut probs = Vec::with_capacity(self.exits.len());
        for &e in &self.exits {
            let p = self.producer[e].expect("exit heads have a producer");
            logits.push(values[p].data.clone());
            probs.push(values[e].data.clone());
        }
        ExitOutputs { logits, probs }
    }

    pub fn forward_deterministic(&self, input: &Tensor) -> Result<ExitOutputs, RuntimeError> {
        let values = self.forward_all(input, &self.deterministic_masks())?;
        Ok(self.exit_outputs(&values))
    }

    /// Monte-Carlo inference: the non-Bayesian prefix runs once and is
    /// reused by all `n_sample / n_exit` passes.
    pub fn forward_mc(
        &self,
        input: &Tensor,
        n_sample: usize,
        seed: u64,
    ) -> Result<(PredictionSet, EvalStats), RuntimeError> {
        self.check_input(input)?;
        let n_pass = passes(n_sample as u64, self.exits.len() as u64)? as usize;
        let mut stats = EvalStats::default();
        let mut cache: Vec<Option<Tensor>> = vec![None; self.order.len()];
        for slot in 0..self.order.len() {
            if self.bayesian[slot] {
                continue;
            }
            let src = match self.producer[slot] {
                Some(p) => cache[p].as_ref().expect("non-Bayesian producers precede"),
                None => input,
            };
            cache[slot] = Some(self.eval_slot(slot, src, &[]));
            stats.non_bayesian_evals += 1;
        }
        let mut per_pass = Vec::with_capacity(n_pass);
        for pass in 0..n_pass {
            let masks = self.draw_pass_masks(seed, pass as u64);
            let mut local: Vec<Option<Tensor>> = vec![None; self.order.len()];
            for slot in 0..self.order.len() {
                if !self.bayesian[slot] {
                    continue;
                }
                let p = self.producer[slot].expect("Bayesian nodes have a producer");
                let src = local[p].as_ref().or(cache[p].as_ref()).expect("producer evaluated");
                local[slot] = Some(self.eval_slot(slot, src, &masks));
                stats.bayesian_evals += 1;
            }
            let row = self
                .exits
                .iter()
                .map(|&e| {
                    local[e]
                        .as_ref()
                        .or(cache[e].as_ref())
                        .expect("exit evaluated")
                        .data
                        .clone()
                })
                .collect();
            per_pass.push(row);
        }
        Ok((PredictionSet { per_pass, n_pass, seed }, stats))
    }
}

/// Logits (exit-head inputs) and probabilities of every exit, shallowest first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitOutputs {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

/// Class probabilities of every exit for every Monte-Carlo pass,
/// indexed `[pass][exit][class]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSet {
    pub per_pass: Vec<Vec<Vec<f64>>>,
    pub n_pass: usize,
    pub seed: u64,
}

impl PredictionSet {
    pub fn n_exit(&self) -> usize {
        self.per_pass.first().map_or(0, Vec::len)
    }

    /// Monte-Carlo mean of one exit.
    pub fn exit_mean(&self, exit: usize) -> Vec<f64> {
        prediction_at(&self.per_pass, exit, ExitMode::PerExit)
    }
}

/// Node evaluations performed by [`Engine::forward_mc`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalStats {
    pub non_bayesian_evals: usize,
    pub bayesian_evals: usize,
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for row in rows {
        if acc.is_empty() {
            acc = vec![0.0; row.len()];
        }
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        n += 1;
    }
    acc.iter().map(|a| a / n as f64).collect()
}

/// Prediction used when scoring exit `exit` (0-based): its own Monte-Carlo
/// mean, or the mean over passes and all exits up to it.
pub fn prediction_at(per_pass: &[Vec<Vec<f64>>], exit: usize, mode: ExitMode) -> Vec<f64> {
    match mode {
        ExitMode::PerExit => mean_rows(per_pass.iter().map(|p| &p[exit])),
        ExitMode::CumulativeEnsemble => mean_rows(per_pass.iter().flat_map(|p| p[..=exit].iter())),
    }
}

/// Equally weighted mean over all passes and exits `1..=upto_exit`.
pub fn ensemble(pred: &PredictionSet, upto_exit: usize) -> Result<Vec<f64>, RuntimeError> {
    if upto_exit == 0 || upto_exit > pred.n_exit() {
        return Err(RuntimeError::InvalidArgument(format!(
            "upto_exit {upto_exit} outside 1..={}",
            pred.n_exit()
        )));
    }
    Ok(prediction_at(
        &pred.per_pass,
        upto_exit - 1,
        ExitMode::CumulativeEnsemble,
    ))
}

fn max_prob(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_threshold(threshold: f64) -> Result<(), RuntimeError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(RuntimeError::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )))
    }
}

/// First exit (0-based) whose score reaches `threshold`, else the last one,
/// with the prediction used for the decision.
pub fn decide_exit(pred: &PredictionSet, threshold: f64, mode: ExitMode) -> (usize, Vec<f64>) {
    let last = pred.n_exit() - 1;
    for i in 0..=last {
        let p = prediction_at(&pred.per_pass, i, mode);
        if i == last || max_prob(&p) >= threshold {
            return (i, p);
        }
    }
    unreachable!("loop returns at the last exit")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitDecision {
    /// 0-based index into the graph's exit list.
    pub exit: usize,
    pub probs: Vec<f64>,
    pub flops_spent: u64,
}

pub fn forward_deterministic(graph: &NetworkGraph, input: &Tensor) -> Result<ExitOutputs, RuntimeError> {
    Engine::new(graph, InferenceOptions::default())?.forward_deterministic(input)
}

pub fn forward_mc(
    graph: &NetworkGraph,
    input: &Tensor,
    n_sample: usize,
    seed: u64,
) -> Result<PredictionSet, RuntimeError> {
    Ok(forward_mc_instrumented(graph, input, n_sample, seed)?.0)
}

pub fn forward_mc_instrumented(
    graph: &NetworkGraph,
    input: &Tensor,
    n_sample: usize,
    seed: u64,
) -> Result<(PredictionSet, EvalStats), RuntimeError> {
    Engine::new(graph, InferenceOptions::default())?.forward_mc(input, n_sample, seed)
}

/// Monte-Carlo predictions for a batch; item `i` uses root seed
/// `item_seed(seed, i)`. Results do not depend on the thread count.
pub fn predict_batch(
    engine: &Engine<'_>,
    inputs: &[Tensor],
    n_sample: usize,
    seed: u64,
) -> Result<Vec<PredictionSet>, RuntimeError> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| engine.forward_mc(x, n_sample, item_seed(seed, i as u64)).map(|r| r.0))
        .collect()
}

/// Confidence-based early exiting. Exits are evaluated lazily in depth
/// order; only the layers needed to reach the chosen exit are executed and
/// their FLOPs counted (stochastic layers once per pass).
pub fn confidence_exit(
    graph: &NetworkGraph,
    input: &Tensor,
    threshold: f64,
    mode: ExitMode,
    n_sample: usize,
    seed: u64,
) -> Result<ExitDecision, RuntimeError> {
    check_threshold(threshold)?;
    let engine = Engine::new(graph, InferenceOptions::default())?;
    engine.check_input(input)?;
    let n_pass = passes(n_sample as u64, engine.exits.len() as u64)? as usize;
    let masks: Vec<Vec<Vec<f64>>> = (0..n_pass).map(|p| engine.draw_pass_masks(seed, p as u64)).collect();
    let mut shared: Vec<Option<Tensor>> = vec![None; engine.len()];
    let mut local: Vec<Vec<Option<Tensor>>> = vec![vec![None; engine.len()]; n_pass];
    let mut per_pass: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_pass];
    let mut flops_spent = 0u64;
    let last = engine.exits.len() - 1;

    for (i, &exit_slot) in engine.exits.iter().enumerate() {
        let mut needed: Vec<usize> = graph
            .ancestors(engine.order[exit_slot])
            .iter()
            .map(|id| engine.slot(*id))
            .collect();
        needed.sort_unstable();
        for slot in needed {
            let cost = layer_flops(engine.node_at(slot))?;
            if engine.bayesian[slot] {
                for pass in 0..n_pass {
                    if local[pass][slot].is_some() {
                        continue;
                    }
                    let p = engine.producer[slot].expect("Bayesian nodes have a producer");
                    let src = local[pass][p]
                        .as_ref()
                        .or(shared[p].as_ref())
                        .expect("producer evaluated");
                    local[pass][slot] = Some(engine.eval_slot(slot, src, &masks[pass]));
                    flops_spent += cost;
                }
            } else if shared[slot].is_none() {
                let src = match engine.producer[slot] {
                    Some(p) => shared[p].as_ref().expect("producer evaluated"),
                    None => input,
                };
                shared[slot] = Some(engine.eval_slot(slot, src, &[]));
                flops_spent += cost;
            }
        }
        for pass in 0..n_pass {
            let t = local[pass][exit_slot]
                .as_ref()
                .or(shared[exit_slot].as_ref())
                .expect("exit evaluated");
            per_pass[pass].push(t.data.clone());
        }
        let p = prediction_at(&per_pass, i, mode);
        if i == last || max_prob(&p) >= threshold {
            return Ok(ExitDecision {
                exit: i,
                probs: p,
                flops_spent,
            });
        }
    }
    unreachable!("the last exit always decides")
}
