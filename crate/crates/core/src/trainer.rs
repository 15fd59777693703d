//! The three training regimes and their shared plumbing.
//!
//! - full-T training: per element, a state is drawn uniformly over all `T`
//!   states of the schedule;
//! - subsequence training: identical loop, but states are drawn uniformly
//!   from a latent subsequence while the retention products stay those of
//!   the full schedule;
//! - per-timestep training: one independent job per subsequence state, each
//!   with its own model, optimizer and seed, executed on a bounded worker
//!   pool.
//!
//! Reproducibility contract: every stream is derived from `(run_seed, tau)`,
//! never from scheduling order, so results are identical for any worker
//! count. The subsequence regime with `s == T` consumes exactly the same
//! random stream as the full-T regime and produces bitwise-identical weights.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_batch, sample_into, DatasetError, LabeledSample, ToyDistribution};
use crate::denoiser::{
    adam_step, AdamParams, AdamState, DenoiserModel, EmbedTable, Gradients, ModelError, ModelSpec,
    Scratch, TrainSample,
};
use crate::metrics::{mode_stats, sliced_wasserstein, MetricError};
use crate::registry::{
    save_checkpoint, CheckpointMeta, CheckpointTau, ModelRegistry, Regime, RegistryError,
};
use crate::sampler::{sample_ddim, sample_with_resolver, SampleError, SamplerMode, SamplerSpec};
use crate::schedule::{LatentSubsequence, NoiseSchedule, ScheduleError, ScheduleKind};
use crate::seeds::{derive_seed, stream_rng, StreamKind};
use crate::{TrainingDomain, Vec2};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}{}", tau.map(|t| format!(" (state {t})")).unwrap_or_default())]
    NonFiniteLoss { iteration: u64, tau: Option<usize> },
    #[error("infeasible budget: need k_min <= k_mean <= k_max, got {k_min} <= {k_mean} <= {k_max}")]
    InfeasibleBudget { k_mean: u64, k_min: u64, k_max: u64 },
    #[error("iteration vector length {got} does not match subsequence length {expected}")]
    AllocationLength { expected: usize, got: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Schedule parameters as they appear in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::build(self.kind, self.t_count, self.beta_start, self.beta_end)
    }
}

/// Periodic-evaluation parameters shared by training and comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Generated and reference sample count per evaluation.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_proj")]
    pub n_proj: usize,
    #[serde(default = "default_metric_seed")]
    pub metric_seed: u64,
    #[serde(default = "default_reference_seed")]
    pub reference_seed: u64,
    #[serde(default = "default_eval_noise_seed")]
    pub noise_seed: u64,
    /// Inference steps used when evaluating a full-T model.
    #[serde(default = "default_eval_steps")]
    pub sampler_steps: usize,
}

fn default_eval_samples() -> usize {
    2000
}
fn default_eval_proj() -> usize {
    128
}
fn default_metric_seed() -> u64 {
    71
}
fn default_reference_seed() -> u64 {
    72
}
fn default_eval_noise_seed() -> u64 {
    73
}
fn default_eval_steps() -> usize {
    32
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            samples: default_eval_samples(),
            n_proj: default_eval_proj(),
            metric_seed: default_metric_seed(),
            reference_seed: default_reference_seed(),
            noise_seed: default_eval_noise_seed(),
            sampler_steps: default_eval_steps(),
        }
    }
}

/// Iteration-budget shaping profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetProfile {
    Uniform,
    SnrProportional,
}

/// Budget request attached to a per-timestep run config; `iterations` is the
/// per-state mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub profile: BudgetProfile,
    pub k_min: u64,
    pub k_max: u64,
}

/// Per-state iteration counts with conserved total `sum = s * k_mean`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub per_tau: Vec<u64>,
    pub k_mean: u64,
    pub k_min: u64,
    pub k_max: u64,
    pub profile: BudgetProfile,
}

/// Distribute `s * k_mean` iterations over the subsequence states.
///
/// `uniform` gives every state `k_mean`. `snr-proportional` interpolates
/// affinely in the SNR rank — the lowest-t (highest SNR) state gets the most
/// iterations — clipped to `[k_min, k_max]` and integer-adjusted by largest
/// remainder so the total is exact.
pub fn allocate_budget(
    subseq: &LatentSubsequence,
    schedule: &NoiseSchedule,
    k_mean: u64,
    k_min: u64,
    k_max: u64,
    profile: BudgetProfile,
) -> Result<BudgetAllocation, TrainError> {
    if !(k_min <= k_mean && k_mean <= k_max) {
        return Err(TrainError::InfeasibleBudget {
            k_mean,
            k_min,
            k_max,
        });
    }
    for &tau in subseq.taus() {
        schedule.check_t(tau)?;
    }
    let s = subseq.len();
    let per_tau = match profile {
        BudgetProfile::Uniform => vec![k_mean; s],
        BudgetProfile::SnrProportional => {
            if s == 1 {
                vec![k_mean]
            } else {
                // Half-spread limited by the tighter clip; centered on k_mean
                // so the pre-rounding total is exact.
                let half = (k_max - k_mean).min(k_mean - k_min) as f64;
                let raw: Vec<f64> = (0..s)
                    .map(|i| {
                        let x = i as f64 / (s - 1) as f64;
                        k_mean as f64 + half * (1.0 - 2.0 * x)
                    })
                    .collect();
                largest_remainder(&raw, s as u64 * k_mean)
            }
        }
    };
    debug_assert_eq!(per_tau.iter().sum::<u64>(), s as u64 * k_mean);
    Ok(BudgetAllocation {
        per_tau,
        k_mean,
        k_min,
        k_max,
        profile,
    })
}

fn largest_remainder(raw: &[f64], target: u64) -> Vec<u64> {
    let mut floors: Vec<u64> = raw.iter().map(|&r| r.floor() as u64).collect();
    let total: u64 = floors.iter().sum();
    let mut remaining = target.saturating_sub(total) as usize;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &idx in &order {
        if remaining == 0 {
            break;
        }
        floors[idx] += 1;
        remaining -= 1;
    }
    floors
}

/// Declarative description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub dataset: ToyDistribution,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub regime: Regime,
    /// Subsequence length; required for the subsequence and per-timestep regimes.
    #[serde(default)]
    pub s: Option<usize>,
    pub batch_size: usize,
    /// Iteration count (per state in the per-timestep regime).
    #[serde(default)]
    pub iterations: Option<u64>,
    /// Explicit per-state iteration counts (per-timestep regime only).
    #[serde(default)]
    pub iterations_per_tau: Option<Vec<u64>>,
    /// Budget shaping (per-timestep regime only); mean is `iterations`.
    #[serde(default)]
    pub budget: Option<BudgetSpec>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub eval: EvalSpec,
    pub run_seed: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Architecture; regime-dependent default when omitted.
    #[serde(default)]
    pub model: Option<ModelSpec>,
}

fn default_lr() -> f64 {
    1e-3
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Architecture in effect: shared models condition on time, per-state
    /// models do not.
    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| match self.regime {
            Regime::Disentangled => ModelSpec::single_state(vec![128, 128, 128]),
            _ => ModelSpec::default(),
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.name.is_empty() {
            return fail("run name must not be empty".into());
        }
        self.dataset.validate()?;
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        match self.regime {
            Regime::Baseline | Regime::Fewer => {
                match self.iterations {
                    None | Some(0) => return fail("iterations must be >= 1".into()),
                    Some(_) => {}
                }
                if self.iterations_per_tau.is_some() || self.budget.is_some() {
                    return fail(
                        "per-state iteration shaping only applies to the disentangled regime"
                            .into(),
                    );
                }
                if self.regime == Regime::Fewer && self.s.is_none() {
                    return fail("the fewer regime needs a subsequence length s".into());
                }
            }
            Regime::Disentangled => {
                let s = match self.s {
                    None | Some(0) => {
                        return fail("the disentangled regime needs a subsequence length s".into())
                    }
                    Some(s) => s,
                };
                match (&self.iterations, &self.iterations_per_tau) {
                    (Some(0), _) => return fail("iterations must be >= 1".into()),
                    (Some(_), Some(_)) => {
                        return fail(
                            "give either iterations or iterations_per_tau, not both".into(),
                        )
                    }
                    (None, None) => {
                        return fail("iterations or iterations_per_tau required".into())
                    }
                    (None, Some(v)) => {
                        if v.len() != s {
                            return Err(TrainError::AllocationLength {
                                expected: s,
                                got: v.len(),
                            });
                        }
                        if v.contains(&0) {
                            return fail("per-state iteration counts must be >= 1".into());
                        }
                        if self.budget.is_some() {
                            return fail(
                                "budget shaping conflicts with explicit iterations_per_tau".into(),
                            );
                        }
                    }
                    (Some(_), None) => {}
                }
            }
        }
        if let Some(s) = self.s {
            if s > self.schedule.t_count {
                return fail(format!(
                    "subsequence length {s} exceeds schedule size {}",
                    self.schedule.t_count
                ));
            }
        }
        let spec = self.model_spec();
        if spec.label_dim > 0 {
            match self.dataset.mode_count() {
                Some(k) if k == spec.label_dim => {}
                Some(k) => {
                    return fail(format!(
                        "label_dim {} does not match mixture components {k}",
                        spec.label_dim
                    ))
                }
                None => {
                    return fail("label conditioning needs a labelled (ring-mixture) dataset".into())
                }
            }
        }
        Ok(())
    }

    /// Total iterations for speedup accounting: per-state count for the
    /// per-timestep regime, plain count otherwise.
    pub fn headline_iterations(&self) -> u64 {
        match (&self.iterations, &self.iterations_per_tau) {
            (Some(k), _) => *k,
            (None, Some(v)) => {
                let s = v.len().max(1) as u64;
                v.iter().sum::<u64>() / s
            }
            (None, None) => 0,
        }
    }
}

/// Persisted provenance of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub schedule_fingerprint: u64,
    /// Resolved training subsequence; absent for the full-T regime.
    pub training_taus: Option<LatentSubsequence>,
    /// Resolved per-state iteration counts (per-timestep regime).
    pub iterations_per_tau: Option<Vec<u64>>,
}

/// One logged observation: the loss at an iteration, plus one metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub metric: String,
    pub value: f64,
    pub tau: Option<usize>,
}

/// Append-only convergence log, one CSV row per observation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceLog {
    pub rows: Vec<LogRow>,
}

impl ConvergenceLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,metric_name,metric_value,tau\n");
        for row in &self.rows {
            let tau = row
                .tau
                .map(|t| t.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.iteration, row.loss, row.metric, row.value, tau
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(TrainError::Config(format!(
                    "convergence row {lineno} has {} fields",
                    fields.len()
                )));
            }
            let parse_err =
                |what: &str| TrainError::Config(format!("bad {what} in convergence row {lineno}"));
            rows.push(LogRow {
                iteration: fields[0].parse().map_err(|_| parse_err("iteration"))?,
                loss: fields[1].parse().map_err(|_| parse_err("loss"))?,
                metric: fields[2].to_string(),
                value: fields[3].parse().map_err(|_| parse_err("value"))?,
                tau: if fields[4].is_empty() {
                    None
                } else {
                    Some(fields[4].parse().map_err(|_| parse_err("tau"))?)
                },
            });
        }
        Ok(Self { rows })
    }

    /// Values of one metric over iterations, for rows without a state tag.
    pub fn metric_curve(&self, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.tau.is_none() && r.metric == metric)
            .map(|r| (r.iteration, r.value))
            .collect()
    }
}

/// Where to put checkpoints written during training.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub schedule_fingerprint: u64,
    pub regime: Regime,
    pub run_seed: u64,
}

impl CheckpointSink {
    fn save(
        &self,
        model: &DenoiserModel,
        tau: CheckpointTau,
        iterations: u64,
    ) -> Result<(), RegistryError> {
        let meta = CheckpointMeta {
            schedule_fingerprint: self.schedule_fingerprint,
            regime: self.regime,
            tau,
            iterations_completed: iterations,
            run_seed: self.run_seed,
        };
        save_checkpoint(model, &meta, &self.dir)?;
        Ok(())
    }
}

/// A trained single-model run (full-T or subsequence regime).
#[derive(Debug)]
pub struct MonolithicRun {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    /// Training subsequence for the subsequence regime.
    pub taus: Option<LatentSubsequence>,
    pub log: ConvergenceLog,
}

impl MonolithicRun {
    pub fn training_domain(&self) -> TrainingDomain {
        match &self.taus {
            None => TrainingDomain::Full,
            Some(t) => TrainingDomain::Subsequence(t.clone()),
        }
    }
}

/// A trained per-timestep run: one model per subsequence state.
#[derive(Debug)]
pub struct DisentangledRun {
    /// Models in ascending state order.
    pub models: Vec<(usize, DenoiserModel)>,
    pub schedule: NoiseSchedule,
    pub taus: LatentSubsequence,
    pub iterations_per_tau: Vec<u64>,
    pub log: ConvergenceLog,
}

impl DisentangledRun {
    pub fn registry(&self) -> Result<ModelRegistry, RegistryError> {
        ModelRegistry::from_models(
            self.schedule.fingerprint(),
            self.models
                .iter()
                .map(|(tau, m)| (*tau, m.clone()))
                .collect(),
        )
    }
}

/// Outcome of [`run`]: whichever artifact the regime produces.
#[derive(Debug)]
pub enum TrainOutcome {
    Monolithic(MonolithicRun),
    Disentangled(DisentangledRun),
}

/// Execute a run config end to end.
pub fn run(
    cfg: &RunConfig,
    workers: usize,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    match cfg.regime {
        Regime::Baseline => Ok(TrainOutcome::Monolithic(train_baseline(cfg, sink)?)),
        Regime::Fewer => Ok(TrainOutcome::Monolithic(train_fewer(cfg, sink)?)),
        Regime::Disentangled => {
            let schedule = cfg.schedule.build()?;
            let taus = schedule.select_taus(cfg.s.expect("validated"))?;
            let per_tau = resolve_iterations(cfg, &taus, &schedule)?;
            Ok(TrainOutcome::Disentangled(train_disentangled(
                cfg, &per_tau, workers, sink,
            )?))
        }
    }
}

/// Per-state iteration counts implied by a validated config.
pub fn resolve_iterations(
    cfg: &RunConfig,
    taus: &LatentSubsequence,
    schedule: &NoiseSchedule,
) -> Result<Vec<u64>, TrainError> {
    if let Some(explicit) = &cfg.iterations_per_tau {
        if explicit.len() != taus.len() {
            return Err(TrainError::AllocationLength {
                expected: taus.len(),
                got: explicit.len(),
            });
        }
        return Ok(explicit.clone());
    }
    let k_mean = cfg.iterations.expect("validated");
    match cfg.budget {
        None => Ok(vec![k_mean; taus.len()]),
        Some(budget) => Ok(allocate_budget(
            taus,
            schedule,
            k_mean,
            budget.k_min,
            budget.k_max,
            budget.profile,
        )?
        .per_tau),
    }
}

/// Full-T training: states drawn uniformly over the whole schedule.
pub fn train_baseline(
    cfg: &RunConfig,
    sink: Option<&CheckpointSink>,
) -> Result<MonolithicRun, TrainError> {
    cfg.validate()?;
    if cfg.regime != Regime::Baseline {
        return Err(TrainError::Config(format!(
            "train_baseline called with regime {:?}",
            cfg.regime
        )));
    }
    train_monolithic(cfg, None, sink)
}

/// Subsequence training: states drawn uniformly from the subsequence, with
/// the retention products of the full schedule.
pub fn train_fewer(
    cfg: &RunConfig,
    sink: Option<&CheckpointSink>,
) -> Result<MonolithicRun, TrainError> {
    cfg.validate()?;
    if cfg.regime != Regime::Fewer {
        return Err(TrainError::Config(format!(
            "train_fewer called with regime {:?}",
            cfg.regime
        )));
    }
    let schedule = cfg.schedule.build()?;
    let taus = schedule.select_taus(cfg.s.expect("validated"))?;
    train_monolithic(cfg, Some(taus), sink)
}

fn reference_points(cfg: &RunConfig) -> Result<Vec<Vec2>, TrainError> {
    Ok(sample_batch(&cfg.dataset, cfg.eval.samples, cfg.eval.reference_seed)?
        .into_iter()
        .map(|s| s.x0)
        .collect())
}

fn eval_rows(
    generated: &[Vec2],
    reference: &[Vec2],
    cfg: &RunConfig,
    iteration: u64,
    loss: f64,
) -> Result<Vec<LogRow>, TrainError> {
    let mut rows = Vec::new();
    let sw = sliced_wasserstein(generated, reference, cfg.eval.n_proj, cfg.eval.metric_seed)?;
    rows.push(LogRow {
        iteration,
        loss,
        metric: "sliced_wasserstein".into(),
        value: sw,
        tau: None,
    });
    if matches!(cfg.dataset, ToyDistribution::RingMixture { .. }) {
        let (coverage, min_mass) = mode_stats(generated, &cfg.dataset)?;
        rows.push(LogRow {
            iteration,
            loss,
            metric: "mode_coverage".into(),
            value: coverage as f64,
            tau: None,
        });
        rows.push(LogRow {
            iteration,
            loss,
            metric: "min_mode_mass".into(),
            value: min_mass,
            tau: None,
        });
    }
    Ok(rows)
}

fn eval_subsequence(
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    training_taus: Option<&LatentSubsequence>,
) -> Result<LatentSubsequence, TrainError> {
    match training_taus {
        Some(t) => Ok(t.clone()),
        None => {
            let steps = cfg.eval.sampler_steps.min(schedule.t_count()).max(1);
            Ok(schedule.select_taus(steps)?)
        }
    }
}

/// Which latent states a training batch draws from.
enum StateDraw<'a> {
    /// Uniform over every schedule state.
    Uniform,
    /// Uniform over a latent subsequence.
    Subsequence(&'a LatentSubsequence),
    /// One fixed state (per-timestep regime).
    Fixed(usize),
}

fn draw_batch(
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    states: &StateDraw,
    label_dim: usize,
    rng: &mut ChaCha8Rng,
    samples: &mut Vec<LabeledSample>,
    batch: &mut Vec<TrainSample>,
) {
    let normal = StandardNormal;
    batch.clear();
    for _ in 0..cfg.batch_size {
        samples.clear();
        sample_into(&cfg.dataset, 1, rng, samples);
        let x0 = samples[0].x0;
        let label = if label_dim > 0 { samples[0].label } else { None };
        let t = match states {
            StateDraw::Fixed(t) => *t,
            StateDraw::Uniform => rng.random_range(0..schedule.t_count()),
            StateDraw::Subsequence(sub) => sub.taus()[rng.random_range(0..sub.len())],
        };
        let eps: Vec2 = [normal.sample(rng), normal.sample(rng)];
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        batch.push(TrainSample {
            x_t: [sa * x0[0] + sb * eps[0], sa * x0[1] + sb * eps[1]],
            t,
            label,
            eps,
        });
    }
}

fn train_monolithic(
    cfg: &RunConfig,
    taus: Option<LatentSubsequence>,
    sink: Option<&CheckpointSink>,
) -> Result<MonolithicRun, TrainError> {
    let schedule = cfg.schedule.build()?;
    let spec = cfg.model_spec();
    let iterations = cfg.iterations.expect("validated");
    let init_seed = derive_seed(cfg.run_seed, 0, StreamKind::ModelInit);
    let mut model = DenoiserModel::init(&spec, schedule.t_count(), init_seed)?;
    let mut adam = AdamState::new(&model, AdamParams::with_lr(cfg.lr));
    let mut grads = Gradients::zeros_like(&model);
    let mut scratch = Scratch::for_model(&model);
    let embeds = EmbedTable::new(schedule.t_count(), spec.time_embed_dim)?;
    let mut rng = stream_rng(cfg.run_seed, 0, StreamKind::TrainData);

    let do_eval = cfg.eval.samples > 0;
    let reference = if do_eval { reference_points(cfg)? } else { Vec::new() };
    let eval_taus = if do_eval {
        Some(eval_subsequence(cfg, &schedule, taus.as_ref())?)
    } else {
        None
    };

    let mut log = ConvergenceLog::default();
    let mut samples = Vec::with_capacity(1);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    let states = match &taus {
        None => StateDraw::Uniform,
        Some(sub) => StateDraw::Subsequence(sub),
    };
    for iteration in 1..=iterations {
        draw_batch(
            cfg,
            &schedule,
            &states,
            spec.label_dim,
            &mut rng,
            &mut samples,
            &mut batch,
        );
        let loss = model.loss_and_grad(&batch, &embeds, &mut grads, &mut scratch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration,
                tau: None,
            });
        }
        adam_step(&mut model, &mut adam, &grads)?;

        let at_eval = cfg.eval_every > 0 && iteration % cfg.eval_every == 0;
        if at_eval || iteration == iterations {
            if do_eval {
                let spec_s = SamplerSpec {
                    mode: SamplerMode::DdimSubseq,
                    inference_taus: eval_taus.clone(),
                    noise_seed: cfg.eval.noise_seed,
                    n_samples: cfg.eval.samples,
                    label: None,
                    allow_fingerprint_mismatch: false,
                };
                let domain = match &taus {
                    None => TrainingDomain::Full,
                    Some(t) => TrainingDomain::Subsequence(t.clone()),
                };
                let generated = sample_ddim(&model, &schedule, &spec_s, &domain)?;
                log.rows
                    .extend(eval_rows(&generated, &reference, cfg, iteration, loss)?);
            } else {
                log.rows.push(LogRow {
                    iteration,
                    loss,
                    metric: "loss".into(),
                    value: loss,
                    tau: None,
                });
            }
        }
        if let (Some(sink), Some(every)) = (sink, cfg.checkpoint_every) {
            if every > 0 && iteration % every == 0 && iteration != iterations {
                sink.save(&model, CheckpointTau::All, iteration)?;
            }
        }
    }
    if let Some(sink) = sink {
        sink.save(&model, CheckpointTau::All, iterations)?;
    }
    Ok(MonolithicRun {
        model,
        schedule,
        taus,
        log,
    })
}

struct StateJobResult {
    tau: usize,
    model: DenoiserModel,
    loss_rows: Vec<(u64, f64)>,
    /// Weight snapshots at evaluation iterations, for registry-level curves.
    snapshots: Vec<(u64, Vec<f64>)>,
}

/// Per-timestep training: one independent job per subsequence state.
///
/// Jobs run on a bounded pool of `workers` threads; each derives every
/// random stream from `(run_seed, tau)`, so the result is a pure function of
/// the config regardless of worker count or completion order.
pub fn train_disentangled(
    cfg: &RunConfig,
    iterations_per_tau: &[u64],
    workers: usize,
    sink: Option<&CheckpointSink>,
) -> Result<DisentangledRun, TrainError> {
    cfg.validate()?;
    if cfg.regime != Regime::Disentangled {
        return Err(TrainError::Config(format!(
            "train_disentangled called with regime {:?}",
            cfg.regime
        )));
    }
    let schedule = cfg.schedule.build()?;
    let taus = schedule.select_taus(cfg.s.expect("validated"))?;
    if iterations_per_tau.len() != taus.len() {
        return Err(TrainError::AllocationLength {
            expected: taus.len(),
            got: iterations_per_tau.len(),
        });
    }

    let spec = cfg.model_spec();
    let jobs: Vec<_> = taus
        .taus()
        .iter()
        .zip(iterations_per_tau)
        .map(|(&tau, &iters)| {
            let schedule = &schedule;
            let spec = &spec;
            move || train_single_state(cfg, schedule, spec, tau, iters, sink)
        })
        .collect();
    let results = run_jobs(jobs, workers);

    let mut models = Vec::with_capacity(results.len());
    let mut log = ConvergenceLog::default();
    let mut per_state: Vec<StateJobResult> = Vec::with_capacity(results.len());
    for result in results {
        per_state.push(result?);
    }
    for r in &per_state {
        for &(iteration, loss) in &r.loss_rows {
            log.rows.push(LogRow {
                iteration,
                loss,
                metric: "loss".into(),
                value: loss,
                tau: Some(r.tau),
            });
        }
    }

    // Registry-level convergence: rebuild the ensemble at each evaluation
    // iteration from the per-state snapshots and measure sample quality.
    if cfg.eval.samples > 0 && cfg.eval_every > 0 {
        let reference = reference_points(cfg)?;
        let max_iters = iterations_per_tau.iter().copied().max().unwrap_or(0);
        let mut grid: Vec<u64> = (1..=max_iters / cfg.eval_every)
            .map(|k| k * cfg.eval_every)
            .collect();
        if grid.last() != Some(&max_iters) {
            grid.push(max_iters);
        }
        for &at in &grid {
            let mut ensemble = Vec::with_capacity(per_state.len());
            let mut losses = Vec::with_capacity(per_state.len());
            for r in &per_state {
                let snap = r
                    .snapshots
                    .iter()
                    .rev()
                    .find(|(it, _)| *it <= at)
                    .expect("snapshot at or before every grid point");
                let mut m = r.model.clone();
                m.set_flat_params(&snap.1)?;
                ensemble.push((r.tau, m));
                if let Some(&(_, loss)) = r
                    .loss_rows
                    .iter()
                    .rev()
                    .find(|(it, _)| *it <= at)
                {
                    losses.push(loss);
                }
            }
            let registry = ModelRegistry::from_models(schedule.fingerprint(), ensemble)?;
            let spec_s = SamplerSpec {
                mode: SamplerMode::Disentangled,
                inference_taus: Some(taus.clone()),
                noise_seed: cfg.eval.noise_seed,
                n_samples: cfg.eval.samples,
                label: None,
                allow_fingerprint_mismatch: false,
            };
            let generated = sample_with_resolver(&registry, &schedule, &spec_s)?;
            let mean_loss = if losses.is_empty() {
                f64::NAN
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            };
            log.rows
                .extend(eval_rows(&generated, &reference, cfg, at, mean_loss)?);
        }
    }

    for r in per_state {
        models.push((r.tau, r.model));
    }
    Ok(DisentangledRun {
        models,
        schedule: schedule.clone(),
        taus,
        iterations_per_tau: iterations_per_tau.to_vec(),
        log,
    })
}

fn train_single_state(
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    spec: &ModelSpec,
    tau: usize,
    iterations: u64,
    sink: Option<&CheckpointSink>,
) -> Result<StateJobResult, TrainError> {
    let init_seed = derive_seed(cfg.run_seed, tau as u64, StreamKind::ModelInit);
    let mut model = DenoiserModel::init(spec, schedule.t_count(), init_seed)?;
    let mut adam = AdamState::new(&model, AdamParams::with_lr(cfg.lr));
    let mut grads = Gradients::zeros_like(&model);
    let mut scratch = Scratch::for_model(&model);
    let embeds = EmbedTable::new(schedule.t_count(), spec.time_embed_dim)?;
    let mut rng = stream_rng(cfg.run_seed, tau as u64, StreamKind::TrainData);

    let snapshot_every = cfg.eval_every;
    let mut loss_rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut samples = Vec::with_capacity(1);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for iteration in 1..=iterations {
        draw_batch(
            cfg,
            schedule,
            &StateDraw::Fixed(tau),
            spec.label_dim,
            &mut rng,
            &mut samples,
            &mut batch,
        );
        let loss = model.loss_and_grad(&batch, &embeds, &mut grads, &mut scratch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration,
                tau: Some(tau),
            });
        }
        adam_step(&mut model, &mut adam, &grads)?;

        let at_eval = snapshot_every > 0 && iteration % snapshot_every == 0;
        if at_eval || iteration == iterations {
            loss_rows.push((iteration, loss));
            snapshots.push((iteration, model.flat_params()));
        }
        if let (Some(sink), Some(every)) = (sink, cfg.checkpoint_every) {
            if every > 0 && iteration % every == 0 && iteration != iterations {
                sink.save(&model, CheckpointTau::At(tau), iteration)?;
            }
        }
    }
    if let Some(sink) = sink {
        sink.save(&model, CheckpointTau::At(tau), iterations)?;
    }
    Ok(StateJobResult {
        tau,
        model,
        loss_rows,
        snapshots,
    })
}

/// Run independent jobs on a bounded worker pool; result order matches job
/// order, independent of completion order.
fn run_jobs<T, F>(jobs: Vec<F>, workers: usize) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let n = jobs.len();
    if n == 0 {
        return Vec::new();
    }
    let worker_count = workers.clamp(1, n);
    if worker_count == 1 {
        return jobs.into_iter().map(|job| job()).collect();
    }
    let cursor = AtomicUsize::new(0);
    let job_cells: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let result_cells: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let idx = cursor.fetch_add(1, Ordering::Relaxed);
                if idx >= n {
                    break;
                }
                let job = job_cells[idx]
                    .lock()
                    .expect("job cell")
                    .take()
                    .expect("job taken once");
                let result = job();
                *result_cells[idx].lock().expect("result cell") = Some(result);
            });
        }
    });
    result_cells
        .into_iter()
        .map(|cell| {
            cell.into_inner()
                .expect("result cell")
                .expect("every job ran")
        })
        .collect()
}
