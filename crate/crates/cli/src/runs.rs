//! Run-directory lifecycle: training a config into a directory, and loading
//! the resulting artifacts back for sampling and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tspace_core::denoiser::DenoiserModel;
use tspace_core::registry::{load_checkpoint, ModelRegistry, Regime, FORMAT_VERSION};
use tspace_core::sampler::{
    sample_ddim, sample_ddpm_full, sample_disentangled, sample_generalized_full, SamplerMode,
    SamplerSpec, TrainingDomain,
};
use tspace_core::schedule::{NoiseSchedule, TauSource};
use tspace_core::trainer::{
    run as train_run, CheckpointSink, ConvergenceLog, RunConfig, RunManifest, TrainOutcome,
};
use tspace_core::Vec2;

use crate::output::{read_text, write_text};
use crate::CliError;

pub const RUN_MANIFEST: &str = "manifest.json";
pub const CONVERGENCE_CSV: &str = "convergence.csv";

/// Train `cfg` into `dir`, writing the manifest, convergence log and
/// checkpoints. Returns the convergence log.
pub fn execute_run(cfg: &RunConfig, dir: &Path, workers: usize) -> Result<ConvergenceLog, CliError> {
    cfg.validate().map_err(CliError::from_train)?;
    let schedule = cfg.schedule.build().map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    let sink = CheckpointSink {
        dir: dir.to_path_buf(),
        schedule_fingerprint: schedule.fingerprint(),
        regime: cfg.regime,
        run_seed: cfg.run_seed,
    };
    let outcome = train_run(cfg, workers, Some(&sink)).map_err(CliError::from_train)?;

    let (log, training_taus, iterations_per_tau) = match &outcome {
        TrainOutcome::Monolithic(run) => (run.log.clone(), run.taus.clone(), None),
        TrainOutcome::Disentangled(run) => (
            run.log.clone(),
            Some(run.taus.clone()),
            Some(run.iterations_per_tau.clone()),
        ),
    };
    if let Some(taus) = &training_taus {
        if taus.source() == TauSource::PaperTableReconstructed {
            eprintln!(
                "note: the 64-state table is reconstructed (entries 264 and 514 are interpolated)"
            );
        }
    }
    let manifest = RunManifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        schedule_fingerprint: schedule.fingerprint(),
        training_taus,
        iterations_per_tau,
    };
    write_text(
        &dir.join(RUN_MANIFEST),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    write_text(&dir.join(CONVERGENCE_CSV), &log.to_csv())?;
    Ok(log)
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let text = read_text(&dir.join(RUN_MANIFEST))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad run manifest in {}: {e}", dir.display())))
}

pub fn load_log(dir: &Path) -> Result<ConvergenceLog, CliError> {
    let text = read_text(&dir.join(CONVERGENCE_CSV))?;
    ConvergenceLog::from_csv(&text).map_err(CliError::from_train)
}

/// The trained artifact of a run directory.
pub enum LoadedRun {
    Monolithic {
        model: Box<DenoiserModel>,
        domain: TrainingDomain,
    },
    Disentangled {
        registry: ModelRegistry,
    },
}

pub fn load_artifact(
    dir: &Path,
    manifest: &RunManifest,
    allow_fingerprint_mismatch: bool,
) -> Result<LoadedRun, CliError> {
    match manifest.config.regime {
        Regime::Baseline | Regime::Fewer => {
            let (ckpt, model) = load_checkpoint(&dir.join("all.manifest.json"))
                .map_err(CliError::from_registry)?;
            if ckpt.schedule_fingerprint != manifest.schedule_fingerprint
                && !allow_fingerprint_mismatch
            {
                return Err(CliError::Usage(format!(
                    "checkpoint fingerprint {:#018x} does not match run manifest {:#018x}",
                    ckpt.schedule_fingerprint, manifest.schedule_fingerprint
                )));
            }
            let domain = match &manifest.training_taus {
                None => TrainingDomain::Full,
                Some(t) => TrainingDomain::Subsequence(t.clone()),
            };
            Ok(LoadedRun::Monolithic {
                model: Box::new(model),
                domain,
            })
        }
        Regime::Disentangled => {
            let expected = if allow_fingerprint_mismatch {
                None
            } else {
                Some(manifest.schedule_fingerprint)
            };
            let registry =
                ModelRegistry::open(dir, expected).map_err(CliError::from_registry)?;
            Ok(LoadedRun::Disentangled { registry })
        }
    }
}

/// Resolved description echoed next to every sample dump.
#[derive(Debug, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub run: PathBuf,
    pub spec: SamplerSpec,
    pub schedule_fingerprint: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub registry_fingerprint: Option<u64>,
}

pub struct SampleOutcome {
    pub points: Vec<Vec2>,
    pub sidecar: SampleSidecar,
}

pub fn run_sampler(
    dir: &Path,
    manifest: &RunManifest,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
) -> Result<SampleOutcome, CliError> {
    let artifact = load_artifact(dir, manifest, spec.allow_fingerprint_mismatch)?;
    let mut registry_fingerprint = None;
    let points = match (&artifact, spec.mode) {
        (LoadedRun::Monolithic { model, domain }, SamplerMode::DdpmFull) => {
            require_full_t(domain)?;
            sample_ddpm_full(model.as_ref(), schedule, spec).map_err(CliError::from_sample)?
        }
        (LoadedRun::Monolithic { model, domain }, SamplerMode::GeneralizedFull { sigma_rule }) => {
            require_full_t(domain)?;
            sample_generalized_full(model.as_ref(), schedule, spec, sigma_rule)
                .map_err(CliError::from_sample)?
        }
        (LoadedRun::Monolithic { model, domain }, SamplerMode::DdimSubseq) => {
            sample_ddim(model.as_ref(), schedule, spec, domain).map_err(CliError::from_sample)?
        }
        (LoadedRun::Disentangled { registry }, SamplerMode::Disentangled) => {
            registry_fingerprint = Some(registry.fingerprint());
            sample_disentangled(registry, schedule, spec).map_err(CliError::from_sample)?
        }
        (LoadedRun::Monolithic { .. }, SamplerMode::Disentangled) => {
            return Err(CliError::Usage(
                "disentangled sampling needs a run trained in the disentangled regime".into(),
            ))
        }
        (LoadedRun::Disentangled { .. }, _) => {
            return Err(CliError::Usage(
                "a disentangled run can only be sampled in disentangled mode".into(),
            ))
        }
    };
    Ok(SampleOutcome {
        points,
        sidecar: SampleSidecar {
            run: dir.to_path_buf(),
            spec: spec.clone(),
            schedule_fingerprint: schedule.fingerprint(),
            registry_fingerprint,
        },
    })
}

fn require_full_t(domain: &TrainingDomain) -> Result<(), CliError> {
    match domain {
        TrainingDomain::Full => Ok(()),
        TrainingDomain::Subsequence(_) => Err(CliError::Usage(
            "full-chain sampling needs a model trained over every state".into(),
        )),
    }
}
