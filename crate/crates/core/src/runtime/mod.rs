//! Deterministic inference: single deterministic passes, Monte-Carlo
//! sampling with cached non-Bayesian prefixes, exit ensembling and
//! confidence-based early exiting, with optional fixed-point emulation.
//!
//! Randomness follows one discipline everywhere: pass `p` of a sample with
//! root seed `s` draws from `Rng::new(s ^ p * GOLDEN_GAMMA)`, and dropout
//! nodes consume that stream in ascending node-id order.

mod bten;
mod exec;
mod fixed;
pub(crate) mod layers;
mod mcd;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flops::FlopError;
use crate::netir::{GraphError, NodeId};

pub use bten::{read_bten, write_bten, BTEN_MAGIC};
pub use exec::{
    confidence_exit, decide_exit, ensemble, forward_deterministic, forward_mc, forward_mc_instrumented, predict_batch,
    prediction_at, Engine, EvalStats, ExitDecision, ExitOutputs, PredictionSet,
};
pub use fixed::{apply_fixed_point, max_value, quantize_slice};
pub use layers::softmax;
pub use mcd::{apply_mask, deterministic_mask, draw_mask, mcd_layer, DropoutScaling};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("shape mismatch at node {node}: expected {expected}, found {found}")]
    ShapeMismatch {
        node: NodeId,
        expected: String,
        found: String,
    },
    #[error("node {0} has no weights")]
    MissingWeights(NodeId),
    #[error("{n_sample} samples cannot be split evenly over {n_exit} exits")]
    IndivisibleSamples { n_sample: usize, n_exit: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<FlopError> for RuntimeError {
    fn from(e: FlopError) -> Self {
        match e {
            FlopError::IndivisibleSamples { n_sample, n_exit } => RuntimeError::IndivisibleSamples {
                n_sample: n_sample as usize,
                n_exit: n_exit as usize,
            },
            other => RuntimeError::InvalidArgument(other.to_string()),
        }
    }
}

/// How exits are scored during confidence-based early exiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    /// The Monte-Carlo mean of the current exit alone.
    PerExit,
    /// The ensemble of every exit reached so far.
    CumulativeEnsemble,
}

impl ExitMode {
    pub fn label(&self) -> &'static str {
        match self {
            ExitMode::PerExit => "per_exit",
            ExitMode::CumulativeEnsemble => "cumulative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub scaling: DropoutScaling,
}
