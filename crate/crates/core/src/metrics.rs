//! Distribution distances and mode statistics on 2-D point sets.
//!
//! These are the evaluation currency of the lab: sliced 1-Wasserstein for
//! convergence curves, energy distance as a second opinion, and per-mode
//! statistics on ring mixtures to make mode collapse a hard number.
//!
//! Point sets are sorted internally before any subsampling, so every metric
//! is invariant under relabeling of the inputs and deterministic given its
//! seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ToyDistribution;
use crate::seeds::{stream_rng, StreamKind};
use crate::Vec2;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("point sets need at least 2 elements (got {a} and {b})")]
    DegenerateSets { a: usize, b: usize },
    #[error("projection count must be >= 1")]
    NoProjections,
    #[error("mode statistics need a ring-mixture distribution")]
    NotAMixture,
}

/// Evaluation summary for one generated set against one reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sliced_wasserstein: f64,
    pub energy_distance: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mode_coverage: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_mode_mass: Option<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
    pub projection_count: usize,
    pub metric_seed: u64,
}

/// Exact 1-D 1-Wasserstein distance between two empirical distributions.
/// Equal sizes reduce to the mean absolute difference of sorted samples;
/// unequal sizes integrate |F_a - F_b| over the merged breakpoints.
fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    if a.len() == b.len() {
        let n = a.len() as f64;
        return a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut total = 0.0;
    let mut cur = f64::min(a[0], b[0]);
    while i < a.len() || j < b.len() {
        while i < a.len() && a[i] == cur {
            i += 1;
        }
        while j < b.len() && b[j] == cur {
            j += 1;
        }
        let next_a = a.get(i).copied().unwrap_or(f64::INFINITY);
        let next_b = b.get(j).copied().unwrap_or(f64::INFINITY);
        let next = f64::min(next_a, next_b);
        if next == f64::INFINITY {
            break;
        }
        total += (i as f64 / n - j as f64 / m).abs() * (next - cur);
        cur = next;
    }
    total
}

fn sorted_points(points: &[Vec2]) -> Vec<Vec2> {
    let mut sorted = points.to_vec();
    sorted.sort_unstable_by(|p, q| {
        p[0].total_cmp(&q[0]).then_with(|| p[1].total_cmp(&q[1]))
    });
    sorted
}

/// Mean 1-D Wasserstein distance over `n_proj` random unit directions.
pub fn sliced_wasserstein(
    a: &[Vec2],
    b: &[Vec2],
    n_proj: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricError::DegenerateSets {
            a: a.len(),
            b: b.len(),
        });
    }
    if n_proj == 0 {
        return Err(MetricError::NoProjections);
    }
    let mut rng = stream_rng(seed, 0, StreamKind::MetricProjections);
    let mut proj_a = vec![0.0; a.len()];
    let mut proj_b = vec![0.0; b.len()];
    let mut total = 0.0;
    for _ in 0..n_proj {
        let angle: f64 = rng.random::<f64>() * std::f64::consts::PI;
        let (dx, dy) = (angle.cos(), angle.sin());
        for (slot, p) in proj_a.iter_mut().zip(a) {
            *slot = p[0] * dx + p[1] * dy;
        }
        for (slot, p) in proj_b.iter_mut().zip(b) {
            *slot = p[0] * dx + p[1] * dy;
        }
        total += wasserstein_1d(&mut proj_a, &mut proj_b);
    }
    Ok(total / n_proj as f64)
}

const ENERGY_PAIRS: usize = 200_000;

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` estimated on subsampled
/// pairs. The same underlying index draws feed all three terms, so two
/// identical multisets give exactly zero.
pub fn energy_distance(a: &[Vec2], b: &[Vec2], seed: u64) -> Result<f64, MetricError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricError::DegenerateSets {
            a: a.len(),
            b: b.len(),
        });
    }
    let a = sorted_points(a);
    let b = sorted_points(b);
    let mut rng = stream_rng(seed, 1, StreamKind::MetricProjections);
    let dist = |p: &Vec2, q: &Vec2| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let mut cross = 0.0;
    let mut within_a = 0.0;
    let mut within_b = 0.0;
    for _ in 0..ENERGY_PAIRS {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let ia = (u1 * a.len() as f64) as usize;
        let ja = (u2 * a.len() as f64) as usize;
        let ib = (u1 * b.len() as f64) as usize;
        let jb = (u2 * b.len() as f64) as usize;
        cross += 0.5 * (dist(&a[ia], &b[jb]) + dist(&a[ja], &b[ib]));
        within_a += dist(&a[ia], &a[ja]);
        within_b += dist(&b[ib], &b[jb]);
    }
    let k = ENERGY_PAIRS as f64;
    // Group the within-set terms so the statistic is exactly symmetric.
    Ok(((2.0 * cross - (within_a + within_b)) / k).max(0.0))
}

/// Assign samples to nearest ring-mixture component and report
/// `(covered modes, minimum mode mass)`.
///
/// A mode counts as covered when it holds at least 1% of the samples and the
/// mean distance of its samples to the component mean is at most three
/// component standard deviations.
pub fn mode_stats(
    samples: &[Vec2],
    dist: &ToyDistribution,
) -> Result<(usize, f64), MetricError> {
    let ToyDistribution::RingMixture { component_std, .. } = *dist else {
        return Err(MetricError::NotAMixture);
    };
    let centers = dist.ring_centers().expect("ring mixture has centers");
    let k = centers.len();
    let mut counts = vec![0usize; k];
    let mut dist_sums = vec![0.0_f64; k];
    for p in samples {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        counts[best] += 1;
        dist_sums[best] += best_d;
    }
    let n = samples.len() as f64;
    let mut covered = 0usize;
    let mut min_mass = f64::INFINITY;
    for c in 0..k {
        let mass = counts[c] as f64 / n;
        min_mass = min_mass.min(mass);
        if mass >= 0.01 {
            let mean_dist = dist_sums[c] / counts[c] as f64;
            if mean_dist <= 3.0 * component_std {
                covered += 1;
            }
        }
    }
    Ok((covered, min_mass))
}

/// Full report on a generated set against a reference set.
pub fn evaluate(
    generated: &[Vec2],
    reference: &[Vec2],
    dist: &ToyDistribution,
    n_proj: usize,
    metric_seed: u64,
) -> Result<MetricReport, MetricError> {
    let sw = sliced_wasserstein(generated, reference, n_proj, metric_seed)?;
    let energy = energy_distance(generated, reference, metric_seed)?;
    let (coverage, min_mass) = match dist {
        ToyDistribution::RingMixture { .. } => {
            let (c, m) = mode_stats(generated, dist)?;
            (Some(c), Some(m))
        }
        _ => (None, None),
    };
    Ok(MetricReport {
        sliced_wasserstein: sw,
        energy_distance: energy,
        mode_coverage: coverage,
        min_mode_mass: min_mass,
        n_generated: generated.len(),
        n_reference: reference.len(),
        projection_count: n_proj,
        metric_seed,
    })
}
