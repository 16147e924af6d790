//! Monte-Carlo dropout with the hardware layer's semantics: an activation
//! is zeroed when its uniform draw exceeds `keep_rate`, and every output is
//! then multiplied by `keep_rate`.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::netir::{Granularity, TensorShape};
use crate::rng::Rng;

/// Output scaling of surviving activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutScaling {
    /// Multiply by `keep_rate` (hardware layer behaviour).
    #[default]
    Literal,
    /// Multiply by `1 / keep_rate` (inverted dropout), for comparisons only.
    Inverted,
}

impl DropoutScaling {
    pub fn factor(&self, keep_rate: f64) -> f64 {
        match self {
            DropoutScaling::Literal => keep_rate,
            DropoutScaling::Inverted => 1.0 / keep_rate,
        }
    }
}

/// Per-element multipliers for one dropout application. Advances `rng` once
/// per element (element-wise) or once per channel (channel-wise).
pub fn draw_mask(
    shape: TensorShape,
    keep_rate: f64,
    granularity: Granularity,
    scaling: DropoutScaling,
    rng: &mut Rng,
) -> Vec<f64> {
    let scale = scaling.factor(keep_rate);
    let mut keep = || if rng.uniform01() > keep_rate { 0.0 } else { scale };
    match granularity {
        Granularity::ElementWise => (0..shape.numel()).map(|_| keep()).collect(),
        Granularity::ChannelWise => {
            let hw = shape.spatial();
            (0..shape.channels)
                .flat_map(|_| std::iter::repeat_n(keep(), hw))
                .collect()
        }
    }
}

/// Multipliers used when dropout is evaluated deterministically: nothing is
/// dropped and every value is scaled.
pub fn deterministic_mask(shape: TensorShape, keep_rate: f64, scaling: DropoutScaling) -> Vec<f64> {
    vec![scaling.factor(keep_rate); shape.numel()]
}

pub fn apply_mask(input: &Tensor, mask: &[f64]) -> Tensor {
    Tensor::new(input.shape, input.data.iter().zip(mask).map(|(x, m)| x * m).collect())
}

/// One stochastic dropout application with the literal scaling.
pub fn mcd_layer(input: &Tensor, keep_rate: f64, rng: &mut Rng, granularity: Granularity) -> Tensor {
    let mask = draw_mask(input.shape, keep_rate, granularity, DropoutScaling::Literal, rng);
    apply_mask(input, &mask)
}
