//! Toolkit for multi-exit Monte-Carlo-dropout networks: graph IR and
//! transformation passes, an analytical FLOP model, a deterministic
//! inference runtime, a small trainer, calibration metrics, a hardware
//! mapping model with an event-driven oracle, and grid-search design-space
//! exploration.

pub mod dse;
pub mod flops;
pub mod mapper;
pub mod metrics;
pub mod netir;
pub mod pipeline;
pub mod plan_doc;
pub mod rng;
pub mod runtime;
pub mod samples;
pub mod selftest;
pub mod trainer;
pub mod transform;
