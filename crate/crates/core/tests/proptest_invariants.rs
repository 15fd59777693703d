//! Property tests for the structural invariants of schedules, subsequences,
//! budget allocation, checkpoint persistence and metrics.

use proptest::prelude::*;

use tspace_core::denoiser::{Activation, DenoiserModel, ModelSpec};
use tspace_core::metrics::{energy_distance, sliced_wasserstein};
use tspace_core::registry::{
    load_checkpoint, save_checkpoint, CheckpointMeta, CheckpointTau, Regime,
};
use tspace_core::schedule::{NoiseSchedule, ScheduleKind};
use tspace_core::trainer::{allocate_budget, BudgetProfile};
use tspace_core::Vec2;

fn any_kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![
        Just(ScheduleKind::LinearBeta),
        Just(ScheduleKind::ScaledLinearBeta)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bars_decrease_and_stay_in_range(
        kind in any_kind(),
        t_count in 1usize..1500,
        beta_start in 1e-6f64..0.2,
        spread in 0.0f64..0.3,
    ) {
        let beta_end = (beta_start + spread).min(0.9);
        let s = NoiseSchedule::build(kind, t_count, beta_start, beta_end).unwrap();
        let bars = s.alpha_bars();
        prop_assert!(bars[0] < 1.0);
        prop_assert!(*bars.last().unwrap() > 0.0);
        for t in 1..t_count {
            prop_assert!(bars[t] < bars[t - 1], "t={t}");
            prop_assert!(s.snr(t).unwrap() < s.snr(t - 1).unwrap());
        }
        for t in 1..t_count {
            prop_assert!(s.sigma_ddpm(t - 1, t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn selected_subsequences_are_valid(
        t_count in 1usize..1500,
        s_frac in 0.0f64..=1.0,
    ) {
        let schedule = NoiseSchedule::build(ScheduleKind::LinearBeta, t_count, 1e-4, 0.02).unwrap();
        let s = ((t_count as f64 * s_frac) as usize).clamp(1, t_count);
        let sub = schedule.select_taus(s).unwrap();
        prop_assert_eq!(sub.len(), s);
        prop_assert_eq!(*sub.taus().last().unwrap(), t_count - 1);
        for w in sub.taus().windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        prop_assert!(sub.taus().iter().all(|&t| t < t_count));
    }

    #[test]
    fn budget_total_is_conserved(
        s in 1usize..=64,
        k_mean in 1u64..30_000,
        below in 0u64..10_000,
        above in 0u64..10_000,
        profile in prop_oneof![Just(BudgetProfile::Uniform), Just(BudgetProfile::SnrProportional)],
    ) {
        let schedule = NoiseSchedule::build(ScheduleKind::LinearBeta, 1000, 1e-4, 0.02).unwrap();
        let sub = schedule.select_taus(s).unwrap();
        let k_min = k_mean.saturating_sub(below);
        let k_max = k_mean + above;
        let alloc = allocate_budget(&sub, &schedule, k_mean, k_min, k_max, profile).unwrap();
        prop_assert_eq!(alloc.per_tau.iter().sum::<u64>(), s as u64 * k_mean);
        prop_assert!(alloc.per_tau.iter().all(|&k| (k_min..=k_max).contains(&k)));
        if profile == BudgetProfile::SnrProportional {
            for w in alloc.per_tau.windows(2) {
                prop_assert!(w[0] >= w[1], "iterations must not increase with t");
            }
        }
    }

    #[test]
    fn checkpoints_roundtrip_bitwise(
        seed in 0u64..1_000_000,
        hidden in 1usize..24,
        te_half in 0usize..6,
        tau in 0usize..1000,
    ) {
        let spec = ModelSpec {
            hidden: vec![hidden],
            activation: Activation::Silu,
            time_embed_dim: te_half * 2,
            label_dim: 0,
        };
        let model = DenoiserModel::init(&spec, 1000, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            schedule_fingerprint: seed ^ 0xfeed,
            regime: Regime::Disentangled,
            tau: CheckpointTau::At(tau),
            iterations_completed: 1,
            run_seed: seed,
        };
        save_checkpoint(&model, &meta, dir.path()).unwrap();
        let (_, loaded) = load_checkpoint(&dir.path().join(format!("t{tau}.manifest.json"))).unwrap();
        let a = model.flat_params();
        let b = loaded.flat_params();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn metric_axioms_hold_on_random_point_sets(
        seed in 0u64..100_000,
        n_a in 2usize..120,
        n_b in 2usize..120,
    ) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<Vec2> {
            (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect()
        };
        let a = draw(n_a);
        let b = draw(n_b);
        let sw_ab = sliced_wasserstein(&a, &b, 8, 7).unwrap();
        let sw_ba = sliced_wasserstein(&b, &a, 8, 7).unwrap();
        prop_assert!(sw_ab >= 0.0);
        prop_assert_eq!(sw_ab, sw_ba);
        prop_assert_eq!(sliced_wasserstein(&a, &a, 8, 7).unwrap(), 0.0);
        let e_ab = energy_distance(&a, &b, 7).unwrap();
        prop_assert!(e_ab >= 0.0);
        prop_assert_eq!(e_ab, energy_distance(&b, &a, 7).unwrap());
        prop_assert_eq!(energy_distance(&a, &a, 7).unwrap(), 0.0);
    }
}
