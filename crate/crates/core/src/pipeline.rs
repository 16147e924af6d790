//! End-to-end run: synthetic data, phase-1 search, phase-3 search on the
//! winner, mapping and the plan document. Every seed derives from one root.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dse::{
    export_hw_candidates, export_results, phase1_search, phase3_search, Constraints, DatasetOracle, DseError, Metric,
    Phase1Grid, Phase1Result, Phase1Settings, Phase3Grid, Phase3Result,
};
use crate::mapper::DeviceProfile;
use crate::netir::{save_graph, NetworkGraph};
use crate::plan_doc::{emit_plan, HardwarePlan, PlanError};
use crate::rng::item_seed;
use crate::runtime::ExitMode;
use crate::trainer::{Generator, SyntheticDataset, TrainConfig};
use crate::transform::ChannelFraction;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dse(#[from] DseError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: SyntheticDataset,
    pub phase1: Phase1Settings,
    pub phase3: Phase3Grid,
    pub constraints: Constraints,
    pub priority: Vec<Metric>,
    pub device: DeviceProfile,
    /// Emit the plan even when it exceeds the device.
    pub force: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: SyntheticDataset::new(
                Generator::GaussianBlobs {
                    classes: 4,
                    dims: 8,
                    spread: 1.0,
                },
                2000,
                500,
                1000,
                0,
            ),
            phase1: Phase1Settings::default(),
            phase3: Phase3Grid::default(),
            constraints: Constraints::default(),
            priority: vec![Metric::Calibration, Metric::Accuracy, Metric::Flops],
            device: crate::samples::zcu102_like(),
            force: false,
        }
    }
}

impl PipelineConfig {
    /// A small configuration that finishes in seconds.
    pub fn quick() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.n_train = 400;
        cfg.dataset.n_val = 200;
        cfg.dataset.n_test = 200;
        cfg.phase1 = Phase1Settings {
            grid: Phase1Grid {
                n_exit: vec![1, 3],
                keep_rates: vec![0.75],
                mcd_layers: vec![1],
                thresholds: vec![None, Some(0.9)],
                exit_modes: vec![ExitMode::CumulativeEnsemble],
                seeds: 1,
                max_configs: None,
            },
            train: TrainConfig {
                epochs: 4,
                ..TrainConfig::default()
            },
            n_sample: 6,
            seed: 0,
        };
        cfg.phase3 = Phase3Grid {
            bitwidths: vec![8, 16],
            channel_fractions: vec![ChannelFraction::Full, ChannelFraction::Half],
            reuse_factors: vec![1, 4],
            strategies: None,
        };
        cfg
    }

    /// Overwrites every seed with one derived from `root`.
    pub fn seeded(mut self, root: u64) -> Self {
        self.dataset.seed = item_seed(root, 0);
        self.phase1.train.seed = item_seed(root, 1);
        self.phase1.seed = item_seed(root, 2);
        self
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub phase1: Phase1Result,
    pub phase3: Phase3Result,
    pub plan: HardwarePlan,
    pub results_csv: String,
    pub hw_csv: String,
    pub plan_document: String,
    /// The selected network, narrowed, annotated and trained.
    pub graph_document: String,
}

pub fn run_pipeline(
    base: &NetworkGraph,
    cfg: &PipelineConfig,
    root_seed: u64,
) -> Result<PipelineOutput, PipelineError> {
    let cfg = cfg.clone().seeded(root_seed);
    if cfg.dataset.generator.input_shape() != base.input_shape()
        || cfg.dataset.generator.num_classes() != base.num_classes()
    {
        return Err(PipelineError::Config(format!(
            "dataset produces {:?} inputs over {} classes; graph `{}` expects {:?} over {}",
            cfg.dataset.generator.input_shape(),
            cfg.dataset.generator.num_classes(),
            base.name(),
            base.input_shape(),
            base.num_classes()
        )));
    }
    let data = cfg.dataset.generate();
    let mut constraints = cfg.constraints.clone();
    constraints.device.get_or_insert_with(|| cfg.device.clone());

    let p1 = phase1_search(base, &data, &cfg.phase1, &constraints, &cfg.priority)?;
    let winner = p1.best();
    let graph = p1
        .graph_for(winner)
        .ok_or_else(|| PipelineError::Config("phase-1 winner has no trained network".into()))?;
    let oracle = DatasetOracle {
        dataset: &data,
        train: cfg.phase1.train.clone(),
        n_sample: cfg.phase1.n_sample,
        seed: cfg.phase1.seed,
    };
    let p3 = phase3_search(
        graph,
        cfg.phase1.n_sample,
        &cfg.device,
        &constraints,
        &cfg.phase3,
        &oracle,
    )?;
    let plan = emit_plan(&p3.graph, &p3.plan, &cfg.device, root_seed, cfg.force)?;
    Ok(PipelineOutput {
        results_csv: export_results(&p1.points),
        hw_csv: export_hw_candidates(&p3.candidates, Some(p3.best)),
        plan_document: plan.to_document(),
        graph_document: save_graph(&p3.graph),
        phase1: p1,
        phase3: p3,
        plan,
    })
}
