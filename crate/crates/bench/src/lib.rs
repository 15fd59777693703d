//! Shared fixtures for the benchmark targets.

use tspace_core::denoiser::{DenoiserModel, ModelSpec};
use tspace_core::registry::ModelRegistry;
use tspace_core::schedule::{NoiseSchedule, ScheduleKind};

pub fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::build(ScheduleKind::LinearBeta, 1000, 1e-4, 0.02).expect("valid parameters")
}

/// In-memory registry with one small model per subsequence state.
pub fn registry_of_size(s: usize) -> (NoiseSchedule, ModelRegistry, Vec<usize>) {
    let schedule = default_schedule();
    let taus = schedule.select_taus(s).expect("s <= T");
    let spec = ModelSpec::single_state(vec![32, 32]);
    let models = taus
        .taus()
        .iter()
        .map(|&tau| {
            (
                tau,
                DenoiserModel::init(&spec, schedule.t_count(), tau as u64).expect("valid spec"),
            )
        })
        .collect();
    let registry = ModelRegistry::from_models(schedule.fingerprint(), models).expect("unique taus");
    let taus = taus.taus().to_vec();
    (schedule, registry, taus)
}
