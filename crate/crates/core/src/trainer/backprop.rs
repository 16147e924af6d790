//! Reverse-mode gradients of the summed exit cross-entropy.

use std::collections::BTreeMap;

use crate::netir::{LayerKind, NetworkGraph, NodeId, Weights};
use crate::runtime::{Engine, InferenceOptions, RuntimeError, Tensor};

/// Loss and weight gradients of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub loss: f64,
    pub per_exit_loss: Vec<f64>,
    /// Indexed by engine slot; `None` for layers without weights.
    pub(crate) grads: Vec<Option<Weights>>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Forward and backward pass for one sample with the given dropout masks.
/// Every exit contributes `-ln p_exit[label]`; dropout passes the gradient
/// through its (scaled) mask.
pub(crate) fn sample_grad(
    engine: &Engine<'_>,
    input: &Tensor,
    label: usize,
    masks: &[Vec<f64>],
) -> Result<SampleGrad, RuntimeError> {
    let values = engine.forward_all(input, masks)?;
    let n = engine.len();
    let mut upstream: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut per_exit_loss = Vec::with_capacity(engine.exit_slots().len());
    for &e in engine.exit_slots() {
        let p = engine.producer_slot(e).expect("exit heads have a producer");
        let logits = &values[p].data;
        per_exit_loss.push(log_sum_exp(logits) - logits[label]);
        let mut g = values[e].data.clone();
        g[label] -= 1.0;
        add_into(&mut upstream[p], g);
    }
    let mut grads: Vec<Option<Weights>> = vec![None; n];
    for slot in (0..n).rev() {
        let Some(g) = upstream[slot].take() else { continue };
        let Some(p) = engine.producer_slot(slot) else { continue };
        let x = &values[p];
        let node = engine.node_at(slot);
        let out_shape = node.output_shape.expect("shapes checked");
        let dx = match node.kind {
            LayerKind::Input | LayerKind::ExitHead { .. } => continue,
            LayerKind::Dense { out_features } => {
                let w = engine.weights_at(slot).expect("weights checked");
                let n_in = x.len();
                let mut dw = vec![0.0; w.kernel.len()];
                let mut dx = vec![0.0; n_in];
                for o in 0..out_features {
                    let row = &w.kernel[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        dw[o * n_in + i] = g[o] * x.data[i];
                        dx[i] += g[o] * row[i];
                    }
                }
                grads[slot] = Some(Weights { kernel: dw, bias: g });
                dx
            }
            LayerKind::Conv2D {
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = engine.weights_at(slot).expect("weights checked");
                let (dw, db, dx) = conv_backward(x, w, &g, out_shape, kernel, stride, padding);
                grads[slot] = Some(Weights { kernel: dw, bias: db });
                dx
            }
            LayerKind::ReLU => g
                .iter()
                .zip(&x.data)
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect(),
            LayerKind::MaxPool { kernel, stride } => {
                let mut dx = vec![0.0; x.len()];
                let in_s = x.shape;
                for c in 0..out_shape.channels {
                    for oy in 0..out_shape.height {
                        for ox in 0..out_shape.width {
                            let mut best = (f64::NEG_INFINITY, 0usize);
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let idx = (c * in_s.height + oy * stride + ky) * in_s.width + ox * stride + kx;
                                    if x.data[idx] > best.0 {
                                        best = (x.data[idx], idx);
                                    }
                                }
                            }
                            dx[best.1] += g[(c * out_shape.height + oy) * out_shape.width + ox];
                        }
                    }
                }
                dx
            }
            LayerKind::GlobalAvgPool => {
                let hw = x.shape.spatial();
                (0..x.len()).map(|i| g[i / hw] / hw as f64).collect()
            }
            LayerKind::Softmax => {
                let s = &values[slot].data;
                let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
                s.iter().zip(&g).map(|(s, g)| s * (g - dot)).collect()
            }
            LayerKind::McDropout { .. } => {
                let mask = &masks[engine
                    .mcd_slots()
                    .iter()
                    .position(|&m| m == slot)
                    .expect("dropout slot")];
                g.iter().zip(mask).map(|(g, m)| g * m).collect()
            }
        };
        add_into(&mut upstream[p], dx);
    }
    Ok(SampleGrad {
        loss: per_exit_loss.iter().sum(),
        per_exit_loss,
        grads,
    })
}

fn conv_backward(
    x: &Tensor,
    w: &Weights,
    g: &[f64],
    out_shape: crate::netir::TensorShape,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_s = x.shape;
    let k2 = kernel * kernel;
    let mut dw = vec![0.0; w.kernel.len()];
    let mut db = vec![0.0; out_shape.channels];
    let mut dx = vec![0.0; x.len()];
    for co in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let go = g[(co * out_shape.height + oy) * out_shape.width + ox];
                db[co] += go;
                for ci in 0..in_s.channels {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= in_s.height as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= in_s.width as isize {
                                continue;
                            }
                            let wi = co * in_s.channels * k2 + (ci * kernel + ky) * kernel + kx;
                            let xi = (ci * in_s.height + iy as usize) * in_s.width + ix as usize;
                            dw[wi] += go * x.data[xi];
                            dx[xi] += go * w.kernel[wi];
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

/// Summed exit cross-entropy of one sample under fixed dropout masks
/// (as returned by [`Engine::draw_masks`]).
pub fn loss_with_masks(
    graph: &NetworkGraph,
    input: &Tensor,
    label: usize,
    masks: &[Vec<f64>],
) -> Result<f64, RuntimeError> {
    let engine = Engine::new(graph, InferenceOptions::default())?;
    Ok(sample_grad(&engine, input, label, masks)?.loss)
}

/// Loss and per-layer weight gradients of one sample under fixed masks.
pub fn loss_and_gradients(
    graph: &NetworkGraph,
    input: &Tensor,
    label: usize,
    masks: &[Vec<f64>],
) -> Result<(f64, BTreeMap<NodeId, Weights>), RuntimeError> {
    let engine = Engine::new(graph, InferenceOptions::default())?;
    let sg = sample_grad(&engine, input, label, masks)?;
    let grads = sg
        .grads
        .into_iter()
        .enumerate()
        .filter_map(|(slot, g)| g.map(|g| (engine.node_at(slot).id, g)))
        .collect();
    Ok((sg.loss, grads))
}
