//! Core algorithms for the tspace diffusion laboratory.
//!
//! The crate implements the full pipeline for comparing diffusion training
//! regimes on 2-D toy distributions:
//!
//! - [`schedule`]: discrete noise schedules and latent-state subsequences
//! - [`dataset`]: seeded toy data samplers and analytic noise-prediction oracles
//! - [`denoiser`]: a small MLP epsilon-predictor with hand-written backprop and Adam
//! - [`trainer`]: the three training regimes (full-T, subsequence, per-timestep)
//! - [`sampler`]: ancestral, generalized and subsequence-accelerated reverse processes
//! - [`registry`]: checkpoint persistence and per-timestep model resolution
//! - [`metrics`]: distribution distances and mode statistics for evaluation
//!
//! All randomness flows through explicitly seeded ChaCha streams, so every
//! result in the crate is reproducible bit-for-bit, independent of thread
//! count or scheduling order.

pub mod dataset;
pub mod denoiser;
pub mod metrics;
pub mod registry;
pub mod sampler;
pub mod schedule;
pub mod seeds;
pub mod trainer;

/// A point in the 2-D data space.
pub type Vec2 = [f64; 2];

pub use dataset::{GaussianEpsOracle, LabeledSample, ToyDistribution};
pub use denoiser::{Activation, AdamParams, AdamState, DenoiserModel, EmbedTable, EpsSource, ModelSpec};
pub use metrics::MetricReport;
pub use registry::{CheckpointManifest, CheckpointTau, ModelRegistry, Regime};
pub use sampler::{SamplerMode, SamplerSpec, SigmaRule, TrainingDomain};
pub use schedule::{LatentSubsequence, NoiseSchedule, ScheduleKind, TauSource};
pub use trainer::{BudgetAllocation, BudgetProfile, RunConfig, RunManifest};
