//! Reverse processes: ancestral sampling, the generalized non-Markovian
//! family, subsequence-accelerated deterministic sampling, and multi-model
//! inference that resolves one frozen model per step.
//!
//! All drivers share one chain implementation. A chain walks the inference
//! subsequence downward; every transition applies one reverse step, and the
//! terminal step maps the lowest state to clean data via the noise-removal
//! predictor (conceptually a transition to retention 1).
//!
//! Noise is drawn from a dedicated stream per sample index, derived from
//! `(noise_seed, sample_index)`. Results are therefore identical however the
//! batch is sharded across threads.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{EpsSource, ModelError};
use crate::registry::{ModelRegistry, RegistryError};
use crate::schedule::{LatentSubsequence, NoiseSchedule, ScheduleError};
use crate::seeds::{stream_rng, StreamKind};
use crate::Vec2;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("timestep order violation: t_prev={t_prev} must be < t={t}")]
    OrderViolation { t_prev: usize, t: usize },
    #[error("sigma {sigma} outside admissible range [0, {limit}]")]
    SigmaOutOfRange { sigma: f64, limit: f64 },
    #[error("sampler mode requires an inference subsequence")]
    MissingInferenceTaus,
    #[error("inference subsequence is not a subset of the model's training states")]
    NotSubsetOfTraining,
    #[error("registry fingerprint {registry:#018x} does not match schedule fingerprint {schedule:#018x}")]
    FingerprintMismatch { registry: u64, schedule: u64 },
    #[error("cannot sample zero points")]
    EmptyRequest,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Noise-scale rule for the generalized reverse process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaRule {
    /// Deterministic steps.
    Zero,
    /// The scale that reproduces ancestral sampling exactly.
    DdpmMatch,
    /// Interpolation `sigma = eta * sigma_ddpm` with `eta` in [0, 1].
    Eta { eta: f64 },
}

/// Which reverse process to run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Ancestral sampling over every state.
    DdpmFull,
    /// Generalized process over every state with a configurable noise scale.
    GeneralizedFull { sigma_rule: SigmaRule },
    /// Deterministic sampling down an inference subsequence.
    DdimSubseq,
    /// Subsequence sampling with one frozen model per state.
    Disentangled,
}

/// A fully resolved sampling request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub mode: SamplerMode,
    /// Required for the subsequence modes; ignored by the full-chain modes.
    pub inference_taus: Option<LatentSubsequence>,
    pub noise_seed: u64,
    pub n_samples: usize,
    #[serde(default)]
    pub label: Option<usize>,
    /// Explicit override for sampling against a registry whose schedule
    /// fingerprint differs. Off by default.
    #[serde(default)]
    pub allow_fingerprint_mismatch: bool,
}

/// The set of states a model was trained on; inference subsequences must be
/// drawn from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainingDomain {
    /// Trained on every state (full-T regime).
    Full,
    /// Trained on a subsequence.
    Subsequence(LatentSubsequence),
}

impl TrainingDomain {
    pub fn admits(&self, inference: &LatentSubsequence) -> bool {
        match self {
            TrainingDomain::Full => true,
            TrainingDomain::Subsequence(trained) => inference.is_subset_of(trained),
        }
    }
}

/// One ancestral reverse step on raw retention products.
///
/// `x_prev = sqrt(ab_prev / ab_t) * (x - (ab_prev - ab_t) / (ab_prev * sqrt(1 - ab_t)) * eps_hat)
///           + sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev)) * noise`
pub fn step_ddpm_raw(x_t: &Vec2, ab_prev: f64, ab_t: f64, eps_hat: &Vec2, noise: &Vec2) -> Vec2 {
    let drift = (ab_prev / ab_t).sqrt();
    let eps_coef = (ab_prev - ab_t) / (ab_prev * (1.0 - ab_t).sqrt());
    let noise_coef = ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt();
    [
        drift * (x_t[0] - eps_coef * eps_hat[0]) + noise_coef * noise[0],
        drift * (x_t[1] - eps_coef * eps_hat[1]) + noise_coef * noise[1],
    ]
}

/// One generalized reverse step on raw retention products.
///
/// `x_prev = sqrt(ab_prev) * (x - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)
///           + sqrt(1 - ab_prev - sigma^2) * eps_hat + sigma * noise`
pub fn step_generalized_raw(
    x_t: &Vec2,
    ab_prev: f64,
    ab_t: f64,
    eps_hat: &Vec2,
    sigma: f64,
    noise: &Vec2,
) -> Result<Vec2, SampleError> {
    let limit_sq = 1.0 - ab_prev;
    if sigma < 0.0 || sigma * sigma > limit_sq {
        return Err(SampleError::SigmaOutOfRange {
            sigma,
            limit: limit_sq.max(0.0).sqrt(),
        });
    }
    let x0_coef = ab_prev.sqrt() / ab_t.sqrt();
    let dir_coef = (1.0 - ab_prev - sigma * sigma).sqrt();
    let noise_removed = (1.0 - ab_t).sqrt();
    Ok([
        x0_coef * (x_t[0] - noise_removed * eps_hat[0]) + dir_coef * eps_hat[0] + sigma * noise[0],
        x0_coef * (x_t[1] - noise_removed * eps_hat[1]) + dir_coef * eps_hat[1] + sigma * noise[1],
    ])
}

/// Ancestral reverse step between two schedule states.
pub fn step_ddpm(
    x_t: &Vec2,
    t_prev: usize,
    t: usize,
    eps_hat: &Vec2,
    noise: &Vec2,
    schedule: &NoiseSchedule,
) -> Result<Vec2, SampleError> {
    if t_prev >= t {
        return Err(SampleError::OrderViolation { t_prev, t });
    }
    schedule.check_t(t)?;
    Ok(step_ddpm_raw(
        x_t,
        schedule.alpha_bar(t_prev),
        schedule.alpha_bar(t),
        eps_hat,
        noise,
    ))
}

/// Generalized reverse step between two schedule states.
pub fn step_generalized(
    x_t: &Vec2,
    t_prev: usize,
    t: usize,
    eps_hat: &Vec2,
    sigma: f64,
    noise: &Vec2,
    schedule: &NoiseSchedule,
) -> Result<Vec2, SampleError> {
    if t_prev >= t {
        return Err(SampleError::OrderViolation { t_prev, t });
    }
    schedule.check_t(t)?;
    step_generalized_raw(
        x_t,
        schedule.alpha_bar(t_prev),
        schedule.alpha_bar(t),
        eps_hat,
        sigma,
        noise,
    )
}

/// The clean-data predictor: `(x - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)`.
/// This is the terminal reverse step, i.e. a transition to retention 1.
pub fn predict_x0(x_t: &Vec2, t: usize, eps_hat: &Vec2, schedule: &NoiseSchedule) -> Vec2 {
    let ab_t = schedule.alpha_bar(t);
    let c = (1.0 - ab_t).sqrt();
    let scale = ab_t.sqrt();
    [
        (x_t[0] - c * eps_hat[0]) / scale,
        (x_t[1] - c * eps_hat[1]) / scale,
    ]
}

/// Per-step model resolution for multi-model inference. Implemented by
/// [`ModelRegistry`]; tests implement it with analytic oracles.
pub trait EpsResolver: Sync {
    fn contains_tau(&self, tau: usize) -> bool;

    fn eps_batch_at(
        &self,
        tau: usize,
        xs: &[Vec2],
        label: Option<usize>,
        out: &mut Vec<Vec2>,
    ) -> Result<(), SampleError>;
}

impl EpsResolver for ModelRegistry {
    fn contains_tau(&self, tau: usize) -> bool {
        self.contains(tau)
    }

    fn eps_batch_at(
        &self,
        tau: usize,
        xs: &[Vec2],
        label: Option<usize>,
        out: &mut Vec<Vec2>,
    ) -> Result<(), SampleError> {
        let model = self.resolve(tau)?;
        model.eps_batch(xs, tau, label, out);
        Ok(())
    }
}

/// Adapter running a single shared model at every step.
struct SingleModel<'a, P: EpsSource + ?Sized>(&'a P);

impl<P: EpsSource + ?Sized> EpsResolver for SingleModel<'_, P> {
    fn contains_tau(&self, _tau: usize) -> bool {
        true
    }

    fn eps_batch_at(
        &self,
        tau: usize,
        xs: &[Vec2],
        label: Option<usize>,
        out: &mut Vec<Vec2>,
    ) -> Result<(), SampleError> {
        self.0.eps_batch(xs, tau, label, out);
        Ok(())
    }
}

enum StepRule {
    Ancestral,
    Generalized(SigmaRule),
}

impl StepRule {
    fn sigma(&self, t_prev: usize, t: usize, schedule: &NoiseSchedule) -> f64 {
        match self {
            StepRule::Ancestral => schedule
                .sigma_ddpm(t_prev, t)
                .expect("chain states are ordered"),
            StepRule::Generalized(rule) => match rule {
                SigmaRule::Zero => 0.0,
                SigmaRule::DdpmMatch => schedule
                    .sigma_ddpm(t_prev, t)
                    .expect("chain states are ordered"),
                SigmaRule::Eta { eta } => {
                    eta * schedule
                        .sigma_ddpm(t_prev, t)
                        .expect("chain states are ordered")
                }
            },
        }
    }
}

/// Walk a reverse chain. `taus` is ascending and ends at the highest-noise
/// state; the walk starts there from standard normal draws and finishes with
/// the terminal predictor at `taus[0]`.
fn run_chain<R: EpsResolver + ?Sized>(
    resolver: &R,
    schedule: &NoiseSchedule,
    taus: &[usize],
    rule: StepRule,
    n_samples: usize,
    noise_seed: u64,
    label: Option<usize>,
) -> Result<Vec<Vec2>, SampleError> {
    if n_samples == 0 {
        return Err(SampleError::EmptyRequest);
    }
    for &tau in taus {
        if !resolver.contains_tau(tau) {
            return Err(SampleError::Registry(RegistryError::MissingTau(tau)));
        }
    }

    let normal = StandardNormal;
    let mut streams: Vec<_> = (0..n_samples)
        .map(|i| stream_rng(noise_seed, i as u64, StreamKind::SampleNoise))
        .collect();
    let mut xs: Vec<Vec2> = streams
        .iter_mut()
        .map(|rng| [normal.sample(rng), normal.sample(rng)])
        .collect();

    let mut eps = Vec::with_capacity(n_samples);
    for i in (1..taus.len()).rev() {
        let (t_prev, t) = (taus[i - 1], taus[i]);
        resolver.eps_batch_at(t, &xs, label, &mut eps)?;
        let sigma = rule.sigma(t_prev, t, schedule);
        let stochastic = sigma > 0.0;
        for (idx, x) in xs.iter_mut().enumerate() {
            let noise: Vec2 = if stochastic {
                let rng = &mut streams[idx];
                [normal.sample(rng), normal.sample(rng)]
            } else {
                [0.0, 0.0]
            };
            *x = match rule {
                StepRule::Ancestral => step_ddpm_raw(
                    x,
                    schedule.alpha_bar(t_prev),
                    schedule.alpha_bar(t),
                    &eps[idx],
                    &noise,
                ),
                StepRule::Generalized(_) => step_generalized_raw(
                    x,
                    schedule.alpha_bar(t_prev),
                    schedule.alpha_bar(t),
                    &eps[idx],
                    sigma,
                    &noise,
                )?,
            };
        }
    }

    // Terminal step: no fresh noise, map to clean data.
    let t0 = taus[0];
    resolver.eps_batch_at(t0, &xs, label, &mut eps)?;
    for (idx, x) in xs.iter_mut().enumerate() {
        *x = predict_x0(x, t0, &eps[idx], schedule);
    }
    Ok(xs)
}

fn full_chain(schedule: &NoiseSchedule) -> Vec<usize> {
    (0..schedule.t_count()).collect()
}

fn subsequence_of(spec: &SamplerSpec) -> Result<&LatentSubsequence, SampleError> {
    spec.inference_taus
        .as_ref()
        .ok_or(SampleError::MissingInferenceTaus)
}

/// Ancestral sampling over every state of the schedule.
pub fn sample_ddpm_full<P: EpsSource + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
) -> Result<Vec<Vec2>, SampleError> {
    run_chain(
        &SingleModel(model),
        schedule,
        &full_chain(schedule),
        StepRule::Ancestral,
        spec.n_samples,
        spec.noise_seed,
        spec.label,
    )
}

/// Generalized sampling over every state with the given noise-scale rule.
pub fn sample_generalized_full<P: EpsSource + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    rule: SigmaRule,
) -> Result<Vec<Vec2>, SampleError> {
    run_chain(
        &SingleModel(model),
        schedule,
        &full_chain(schedule),
        StepRule::Generalized(rule),
        spec.n_samples,
        spec.noise_seed,
        spec.label,
    )
}

/// Deterministic subsequence sampling with one shared model.
///
/// The inference subsequence must lie inside the model's training domain.
pub fn sample_ddim<P: EpsSource + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    trained: &TrainingDomain,
) -> Result<Vec<Vec2>, SampleError> {
    let taus = subsequence_of(spec)?;
    if !trained.admits(taus) {
        return Err(SampleError::NotSubsetOfTraining);
    }
    run_chain(
        &SingleModel(model),
        schedule,
        taus.taus(),
        StepRule::Generalized(SigmaRule::Zero),
        spec.n_samples,
        spec.noise_seed,
        spec.label,
    )
}

/// Subsequence sampling that resolves a distinct frozen model per step.
///
/// The resolver's training domain is exactly its key set, so the
/// subset requirement reduces to the missing-timestep check inside the walk.
pub fn sample_with_resolver<R: EpsResolver + ?Sized>(
    resolver: &R,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
) -> Result<Vec<Vec2>, SampleError> {
    let taus = subsequence_of(spec)?;
    run_chain(
        resolver,
        schedule,
        taus.taus(),
        StepRule::Generalized(SigmaRule::Zero),
        spec.n_samples,
        spec.noise_seed,
        spec.label,
    )
}

/// Multi-model inference over a checkpoint registry.
pub fn sample_disentangled(
    registry: &ModelRegistry,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
) -> Result<Vec<Vec2>, SampleError> {
    if registry.fingerprint() != schedule.fingerprint() && !spec.allow_fingerprint_mismatch {
        return Err(SampleError::FingerprintMismatch {
            registry: registry.fingerprint(),
            schedule: schedule.fingerprint(),
        });
    }
    sample_with_resolver(registry, schedule, spec)
}
