//! Small SGD trainer for multi-exit dropout networks on synthetic data.
//!
//! The loss is the unweighted sum of the cross-entropies of every exit.
//! Dropout stays active while training, with fresh masks for every sample.

mod backprop;
mod data;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ece, CalibrationReport, MetricsError};
use crate::netir::{GraphError, NetworkGraph, NodeId, Weights};
use crate::rng::{item_seed, pass_seed, Rng};
use crate::runtime::{predict_batch, prediction_at, Engine, ExitMode, InferenceOptions, PredictionSet, RuntimeError};

pub use backprop::{loss_and_gradients, loss_with_masks};
pub use data::{Dataset, Generator, Split, SyntheticDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    DivergenceDetected { epoch: usize, step: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    JointExitCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 20,
            loss: Loss::JointExitCrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: NetworkGraph,
    /// Mean per-sample loss of every epoch.
    pub loss_curve: Vec<f64>,
    /// Final-exit accuracy on the training split, dropout in expected-value mode.
    pub train_accuracy: f64,
}

/// Batch-mean loss and gradients, keyed by node id. Per-sample work runs in
/// parallel; the reduction is in sample order.
fn batch_grad(
    graph: &NetworkGraph,
    split: &Split,
    indices: &[usize],
    mask_root: u64,
) -> Result<(f64, BTreeMap<NodeId, Weights>), TrainError> {
    let engine = Engine::new(graph, InferenceOptions::default())?;
    let samples: Vec<backprop::SampleGrad> = indices
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let masks = engine.draw_masks(&mut Rng::new(item_seed(mask_root, pos as u64)));
            backprop::sample_grad(&engine, &split.inputs[i], split.labels[i], &masks)
        })
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<NodeId, Weights> = BTreeMap::new();
    for s in samples {
        loss += s.loss;
        for (slot, g) in s.grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let id = engine.node_at(slot).id;
            match acc.get_mut(&id) {
                Some(a) => {
                    a.kernel.iter_mut().zip(&g.kernel).for_each(|(a, b)| *a += b);
                    a.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
                }
                None => {
                    acc.insert(id, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        g.kernel.iter_mut().for_each(|v| *v *= scale);
        g.bias.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, acc))
}

fn sgd_update(values: &mut [f64], grads: Option<&[f64]>, velocity: &mut [f64], cfg: &TrainConfig) {
    for (i, w) in values.iter_mut().enumerate() {
        let g = grads.map_or(0.0, |g| g[i]) + cfg.weight_decay * *w;
        velocity[i] = cfg.momentum * velocity[i] + g;
        *w -= cfg.lr * velocity[i];
    }
}

/// Trains `graph` on `dataset.train`. Missing weights are initialised from
/// the config seed; batch order and masks are fixed by the seed.
pub fn train(graph: &NetworkGraph, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    let mut g = graph.clone();
    g.initialize_weights(config.seed, false)?;
    let mut velocity: BTreeMap<NodeId, Weights> = g
        .nodes()
        .iter()
        .filter_map(|n| {
            n.weights.as_ref().map(|w| {
                (
                    n.id,
                    Weights {
                        kernel: vec![0.0; w.kernel.len()],
                        bias: vec![0.0; w.bias.len()],
                    },
                )
            })
        })
        .collect();
    let weighted: Vec<NodeId> = velocity.keys().copied().collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let n = dataset.train.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(pass_seed(config.seed, 2 * epoch as u64)).shuffle(&mut order);
        let epoch_root = pass_seed(config.seed, 2 * epoch as u64 + 1);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, grads) = batch_grad(&g, &dataset.train, batch, item_seed(epoch_root, step as u64))?;
            if !loss.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch, step, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            for &id in &weighted {
                let mut w = g.node(id).and_then(|n| n.weights.clone()).expect("weighted layer");
                let v = velocity.get_mut(&id).expect("velocity per layer");
                let gr = grads.get(&id);
                sgd_update(&mut w.kernel, gr.map(|g| g.kernel.as_slice()), &mut v.kernel, config);
                sgd_update(&mut w.bias, gr.map(|g| g.bias.as_slice()), &mut v.bias, config);
                if w.kernel.iter().chain(&w.bias).any(|v| !v.is_finite()) {
                    return Err(TrainError::DivergenceDetected {
                        epoch,
                        step,
                        loss: f64::INFINITY,
                    });
                }
                g.set_weights(id, w)?;
            }
        }
        loss_curve.push(epoch_loss / n as f64);
    }
    let train_accuracy = deterministic_accuracy(&g, &dataset.train)?;
    Ok(TrainOutcome {
        graph: g,
        loss_curve,
        train_accuracy,
    })
}

/// Final-exit accuracy with dropout in expected-value mode.
pub fn deterministic_accuracy(graph: &NetworkGraph, split: &Split) -> Result<f64, TrainError> {
    let engine = Engine::new(graph, InferenceOptions::default())?;
    let probs: Vec<Vec<f64>> = split
        .inputs
        .par_iter()
        .map(|x| {
            engine
                .forward_deterministic(x)
                .map(|o| o.probs.last().cloned().unwrap_or_default())
        })
        .collect::<Result<_, _>>()?;
    Ok(crate::metrics::accuracy(&probs, &split.labels)?)
}

/// Calibration of a trained network on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_sample: usize,
    pub seed: u64,
    /// Monte-Carlo mean of each exit on its own.
    pub per_exit: Vec<CalibrationReport>,
    /// Ensembles over exits `1..=k` for every `k`; the last is the full ensemble.
    pub prefixes: Vec<CalibrationReport>,
    #[serde(skip)]
    pub predictions: Vec<PredictionSet>,
}

impl EvalReport {
    pub fn ensemble(&self) -> &CalibrationReport {
        self.prefixes.last().expect("at least one exit")
    }
}

pub const DEFAULT_BINS: usize = 10;

pub fn evaluate(graph: &NetworkGraph, split: &Split, n_sample: usize, seed: u64) -> Result<EvalReport, TrainError> {
    if split.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    let engine = Engine::new(graph, InferenceOptions::default())?;
    let predictions = predict_batch(&engine, &split.inputs, n_sample, seed)?;
    let report = |exit: usize, mode: ExitMode| -> Result<CalibrationReport, TrainError> {
        let probs: Vec<Vec<f64>> = predictions
            .iter()
            .map(|p| prediction_at(&p.per_pass, exit, mode))
            .collect();
        Ok(ece(&probs, &split.labels, DEFAULT_BINS)?)
    };
    let n_exit = graph.n_exit();
    let per_exit = (0..n_exit)
        .map(|e| report(e, ExitMode::PerExit))
        .collect::<Result<_, _>>()?;
    let prefixes = (0..n_exit)
        .map(|e| report(e, ExitMode::CumulativeEnsemble))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        n_sample,
        seed,
        per_exit,
        prefixes,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Tensor;
    use crate::samples;
    use crate::transform::{insert_exits, insert_mcd, ExitPolicy, McdPolicy};

    fn blobs(seed: u64) -> Dataset {
        SyntheticDataset::new(
            Generator::GaussianBlobs {
                classes: 3,
                dims: 4,
                spread: 0.15,
            },
            150,
            0,
            60,
            seed,
        )
        .generate()
    }

    fn three_exit_net() -> NetworkGraph {
        let base = samples::mlp("m", 4, &[6, 6], 3);
        let anchors = samples::mlp_hidden_outputs(&base);
        let me = insert_exits(&base, &ExitPolicy::ExplicitIds(anchors)).unwrap();
        insert_mcd(&me, &McdPolicy::new(1, 0.75)).unwrap()
    }

    #[test]
    fn zero_epochs_keep_weights() {
        let mut g = samples::mlp("m", 4, &[5], 3);
        g.initialize_weights(1, true).unwrap();
        let out = train(
            &g,
            &blobs(1),
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.graph, g);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = TrainConfig {
            epochs: 15,
            lr: 0.05,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let d = blobs(2);
        let a = train(&three_exit_net(), &d, &cfg).unwrap();
        let b = train(&three_exit_net(), &d, &cfg).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert!(a.loss_curve.last().unwrap() < &a.loss_curve[0]);
        assert!(a.train_accuracy > 0.9, "{}", a.train_accuracy);
    }

    #[test]
    fn full_batch_step_matches_gradient_descent() {
        let mut g = samples::mlp("m", 4, &[5], 3);
        g.initialize_weights(9, true).unwrap();
        let d = blobs(5);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.2,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: d.train.len(),
            ..TrainConfig::default()
        };
        let stepped = train(&g, &d, &cfg).unwrap().graph;
        let mut mean: BTreeMap<NodeId, Weights> = BTreeMap::new();
        for (x, &y) in d.train.inputs.iter().zip(&d.train.labels) {
            let (_, grads) = loss_and_gradients(&g, x, y, &[]).unwrap();
            for (id, gr) in grads {
                let e = mean.entry(id).or_insert_with(|| Weights {
                    kernel: vec![0.0; gr.kernel.len()],
                    bias: vec![0.0; gr.bias.len()],
                });
                e.kernel
                    .iter_mut()
                    .zip(&gr.kernel)
                    .for_each(|(a, b)| *a += b / d.train.len() as f64);
                e.bias
                    .iter_mut()
                    .zip(&gr.bias)
                    .for_each(|(a, b)| *a += b / d.train.len() as f64);
            }
        }
        for (id, gr) in mean {
            let before = g.node(id).unwrap().weights.as_ref().unwrap();
            let after = stepped.node(id).unwrap().weights.as_ref().unwrap();
            for ((b, a), d) in before.kernel.iter().zip(&after.kernel).zip(&gr.kernel) {
                assert!((b - 0.2 * d - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn summed_loss_dominates_each_exit() {
        let mut g = three_exit_net();
        g.initialize_weights(4, true).unwrap();
        let engine = Engine::new(&g, InferenceOptions::default()).unwrap();
        let x = Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]);
        let masks = engine.draw_masks(&mut Rng::new(1));
        let s = backprop::sample_grad(&engine, &x, 2, &masks).unwrap();
        assert_eq!(s.per_exit_loss.len(), 3);
        for l in &s.per_exit_loss {
            assert!(*l >= 0.0 && s.loss >= *l);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut g = three_exit_net();
        g.initialize_weights(8, true).unwrap();
        let engine = Engine::new(&g, InferenceOptions::default()).unwrap();
        let masks = engine.draw_masks(&mut Rng::new(5));
        let x = Tensor::vector(vec![0.4, -0.7, 0.25, 0.9]);
        let (_, grads) = loss_and_gradients(&g, &x, 1, &masks).unwrap();
        let eps = 1e-4;
        for (id, gr) in grads {
            let w = g.node(id).unwrap().weights.clone().unwrap();
            for i in 0..w.kernel.len() {
                let mut probe = g.clone();
                let mut wp = w.clone();
                wp.kernel[i] += eps;
                probe.set_weights(id, wp.clone()).unwrap();
                let lp = loss_with_masks(&probe, &x, 1, &masks).unwrap();
                wp.kernel[i] -= 2.0 * eps;
                probe.set_weights(id, wp).unwrap();
                let lm = loss_with_masks(&probe, &x, 1, &masks).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let denom = numeric.abs().max(gr.kernel[i].abs()).max(1e-8);
                assert!(
                    (numeric - gr.kernel[i]).abs() / denom < 1e-4,
                    "node {id} w{i}: {numeric} vs {}",
                    gr.kernel[i]
                );
            }
        }
    }

    #[test]
    fn evaluate_reports_match_metrics() {
        let mut g = three_exit_net();
        g.initialize_weights(2, true).unwrap();
        let d = blobs(3);
        let r = evaluate(&g, &d.test, 6, 11).unwrap();
        assert_eq!(r.per_exit.len(), 3);
        assert_eq!(r.prefixes[0], r.per_exit[0]);
        let probs: Vec<Vec<f64>> = r
            .predictions
            .iter()
            .map(|p| crate::runtime::ensemble(p, 3).unwrap())
            .collect();
        assert_eq!(r.ensemble(), &ece(&probs, &d.test.labels, 10).unwrap());
        assert!(matches!(
            evaluate(&g, &Split::default(), 6, 1),
            Err(TrainError::Metrics(MetricsError::EmptyInput))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let mut g = samples::mlp("m", 4, &[5], 3);
        g.initialize_weights(1, true).unwrap();
        let cfg = TrainConfig {
            lr: 1e300,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&g, &blobs(1), &cfg),
            Err(TrainError::DivergenceDetected { .. })
        ));
    }
}
