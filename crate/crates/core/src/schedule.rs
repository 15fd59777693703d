//! Noise schedules over discrete timesteps and latent-state subsequences.
//!
//! A [`NoiseSchedule`] owns the per-step `beta` sequence and the cumulative
//! retention products `alpha_bar[t] = prod_{i<=t} (1 - beta[i])` for all `T`
//! base states. It is the single source of truth shared by every training
//! regime: subsequence and per-timestep training index into the same array,
//! so the `alpha_bar` values they consume are bitwise-equal to the full-T
//! baseline's entries by construction.
//!
//! Timesteps are 0-based throughout: valid states are `0..T`, and the
//! highest-noise state is `T - 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::fnv1a_words;

/// Subsequence tables for `T = 1000`, ending at state 999.
///
/// `S = 64` is stored with 64 entries; the two entries at 264 and 514 are
/// filled in arithmetically (the neighbouring gaps follow a +15/+16 pattern)
/// and any subsequence built from this table is flagged as reconstructed.
pub const TAUS_4: [usize; 4] = [249, 499, 749, 999];

pub const TAUS_8: [usize; 8] = [124, 249, 374, 499, 624, 749, 874, 999];

pub const TAUS_16: [usize; 16] = [
    62, 124, 186, 249, 311, 374, 436, 499, 561, 624, 686, 749, 811, 874, 936, 999,
];

pub const TAUS_32: [usize; 32] = [
    31, 62, 93, 124, 155, 186, 217, 249, 280, 311, 342, 374, 405, 436, 467, 499, 530, 561, 592,
    624, 655, 686, 717, 749, 780, 811, 842, 874, 905, 936, 967, 999,
];

pub const TAUS_64: [usize; 64] = [
    16, 31, 46, 62, 77, 93, 108, 124, 139, 155, 170, 186, 201, 217, 233, 249, 264, 280, 295, 311,
    326, 342, 358, 374, 389, 405, 420, 436, 451, 467, 483, 499, 514, 530, 545, 561, 576, 592, 608,
    624, 639, 655, 670, 686, 701, 717, 733, 749, 764, 780, 795, 811, 826, 842, 858, 874, 889, 905,
    920, 936, 951, 967, 983, 999,
];

/// The two reconstructed entries of [`TAUS_64`].
pub const TAUS_64_RECONSTRUCTED: [usize; 2] = [264, 514];

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least one timestep")]
    ZeroTimesteps,
    #[error("beta endpoints out of range: start={start}, end={end} (need 0 < start <= end < 1)")]
    BetaOutOfRange { start: f64, end: f64 },
    #[error("timestep {t} out of range for T={t_count}")]
    TimestepOutOfRange { t: usize, t_count: usize },
    #[error("subsequence length {s} exceeds T={t_count}")]
    SubsequenceTooLong { s: usize, t_count: usize },
    #[error("subsequence must contain at least one timestep")]
    EmptySubsequence,
    #[error("timestep order violation: t_prev={t_prev} must be < t={t}")]
    OrderViolation { t_prev: usize, t: usize },
    #[error("subsequence timesteps must be strictly ascending (taus[{index}] = {tau})")]
    NotAscending { index: usize, tau: usize },
    #[error("subsequence must end at the highest-noise state {expected}, got {got}")]
    WrongLastState { expected: usize, got: usize },
}

/// How the beta endpoints are interpolated across the `T` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `beta` interpolated linearly between the endpoints.
    LinearBeta,
    /// `sqrt(beta)` interpolated linearly, then squared.
    ScaledLinearBeta,
}

impl ScheduleKind {
    fn tag(self) -> u64 {
        match self {
            ScheduleKind::LinearBeta => 1,
            ScheduleKind::ScaledLinearBeta => 2,
        }
    }
}

/// Where a subsequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSource {
    /// Verbatim from the published tables.
    PaperTable,
    /// From the published `S = 64` table with the two missing entries filled in.
    PaperTableReconstructed,
    /// Generated by rounding a linear spacing.
    Generated,
}

/// Ascending timestep indices into a [`NoiseSchedule`].
///
/// The last entry is always `T - 1`: reverse processes start at the
/// highest-noise state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSubsequence {
    taus: Vec<usize>,
    source: TauSource,
}

impl LatentSubsequence {
    /// Validate and wrap an explicit timestep list.
    pub fn new(taus: Vec<usize>, source: TauSource, t_count: usize) -> Result<Self, ScheduleError> {
        if taus.is_empty() {
            return Err(ScheduleError::EmptySubsequence);
        }
        for (i, &tau) in taus.iter().enumerate() {
            if tau >= t_count {
                return Err(ScheduleError::TimestepOutOfRange { t: tau, t_count });
            }
            if i > 0 && taus[i - 1] >= tau {
                return Err(ScheduleError::NotAscending { index: i, tau });
            }
        }
        let last = *taus.last().expect("non-empty");
        if last != t_count - 1 {
            return Err(ScheduleError::WrongLastState {
                expected: t_count - 1,
                got: last,
            });
        }
        Ok(Self { taus, source })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn source(&self) -> TauSource {
        self.source
    }

    pub fn contains(&self, tau: usize) -> bool {
        self.taus.binary_search(&tau).is_ok()
    }

    /// True when every timestep of `self` appears in `other`.
    pub fn is_subset_of(&self, other: &LatentSubsequence) -> bool {
        self.taus.iter().all(|&t| other.contains(t))
    }
}

/// A discrete noise schedule over `T` base timesteps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    fingerprint: u64,
}

impl NoiseSchedule {
    /// Construct a schedule of `t_count` steps between the given beta endpoints.
    pub fn build(
        kind: ScheduleKind,
        t_count: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self, ScheduleError> {
        if t_count == 0 {
            return Err(ScheduleError::ZeroTimesteps);
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::BetaOutOfRange {
                start: beta_start,
                end: beta_end,
            });
        }

        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => linspace(beta_start, beta_end, t_count),
            ScheduleKind::ScaledLinearBeta => linspace(beta_start.sqrt(), beta_end.sqrt(), t_count)
                .into_iter()
                .map(|b| b * b)
                .collect(),
        };

        let mut alpha_bars = Vec::with_capacity(t_count);
        let mut prod = 1.0_f64;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }

        let fingerprint = fnv1a_words(&[
            kind.tag(),
            t_count as u64,
            beta_start.to_bits(),
            beta_end.to_bits(),
        ]);

        Ok(Self {
            kind,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
            fingerprint,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// 64-bit hash of (kind, T, beta endpoints); stamped onto checkpoints.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative retention product at state `t`. Panics when out of range;
    /// use [`NoiseSchedule::check_t`] first on untrusted input.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<(), ScheduleError> {
        if t < self.t_count() {
            Ok(())
        } else {
            Err(ScheduleError::TimestepOutOfRange {
                t,
                t_count: self.t_count(),
            })
        }
    }

    /// Signal-to-noise ratio at state `t`: `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check_t(t)?;
        Ok(snr_of(self.alpha_bars[t]))
    }

    /// The per-step noise scale that makes the generalized reverse process
    /// coincide with ancestral sampling.
    pub fn sigma_ddpm(&self, t_prev: usize, t: usize) -> Result<f64, ScheduleError> {
        if t_prev >= t {
            return Err(ScheduleError::OrderViolation { t_prev, t });
        }
        self.check_t(t)?;
        Ok(sigma_ddpm_of(self.alpha_bars[t_prev], self.alpha_bars[t]))
    }

    /// Select `s` latent states out of this schedule.
    ///
    /// For `T = 1000` and `s` in {4, 8, 16, 32, 64} the published tables are
    /// returned verbatim (64 with the reconstruction flag). `s = T` returns
    /// all states. Anything else rounds a linear spacing:
    /// `tau_k = round(k * (T - 1) / s)` for `k = 1..=s`.
    pub fn select_taus(&self, s: usize) -> Result<LatentSubsequence, ScheduleError> {
        let t_count = self.t_count();
        if s == 0 {
            return Err(ScheduleError::EmptySubsequence);
        }
        if s > t_count {
            return Err(ScheduleError::SubsequenceTooLong { s, t_count });
        }

        if t_count == 1000 {
            let table: Option<(&[usize], TauSource)> = match s {
                4 => Some((&TAUS_4, TauSource::PaperTable)),
                8 => Some((&TAUS_8, TauSource::PaperTable)),
                16 => Some((&TAUS_16, TauSource::PaperTable)),
                32 => Some((&TAUS_32, TauSource::PaperTable)),
                64 => Some((&TAUS_64, TauSource::PaperTableReconstructed)),
                _ => None,
            };
            if let Some((taus, source)) = table {
                return LatentSubsequence::new(taus.to_vec(), source, t_count);
            }
        }

        // The rounded spacing develops duplicates when its slope drops below
        // one, which only happens at s == T; that case is exactly "all states".
        let taus: Vec<usize> = if s == t_count {
            (0..t_count).collect()
        } else {
            (1..=s)
                .map(|k| ((k * (t_count - 1)) as f64 / s as f64).round() as usize)
                .collect()
        };
        LatentSubsequence::new(taus, TauSource::Generated, t_count)
    }
}

/// `snr = alpha_bar / (1 - alpha_bar)` on a raw retention product.
pub fn snr_of(alpha_bar: f64) -> f64 {
    alpha_bar / (1.0 - alpha_bar)
}

/// `sigma = sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)` on
/// raw retention products; zero when they coincide.
pub fn sigma_ddpm_of(alpha_bar_prev: f64, alpha_bar_t: f64) -> f64 {
    ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt()
        * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}
