//! Paired-run comparisons: train (or reuse) a set of runs that share data
//! and metric seeds, merge their convergence curves, and report how many
//! iterations the baseline needs to match each run's final quality.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tspace_core::trainer::{ConvergenceLog, RunConfig};

use crate::output::write_text;
use crate::runs::{execute_run, load_log, load_manifest, RUN_MANIFEST};
use crate::CliError;

fn default_metric() -> String {
    "sliced_wasserstein".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSpec {
    /// Name of the run the others are measured against.
    pub baseline: String,
    #[serde(default = "default_metric")]
    pub metric: String,
}

/// A set of runs to overlay in one convergence table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub output_dir: PathBuf,
    pub comparison: ComparisonSpec,
    pub runs: Vec<RunConfig>,
}

impl ExperimentPlan {
    pub fn from_json(json: &str) -> Result<Self, CliError> {
        let plan: ExperimentPlan =
            serde_json::from_str(json).map_err(|e| CliError::Usage(format!("bad plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.runs.is_empty() {
            return Err(CliError::Usage("plan contains no runs".into()));
        }
        for (i, run) in self.runs.iter().enumerate() {
            run.validate().map_err(CliError::from_train)?;
            for other in &self.runs[..i] {
                if other.name == run.name {
                    return Err(CliError::Usage(format!(
                        "duplicate run name {:?} in plan",
                        run.name
                    )));
                }
            }
        }
        if !self.runs.iter().any(|r| r.name == self.comparison.baseline) {
            return Err(CliError::Usage(format!(
                "baseline run {:?} is not in the plan",
                self.comparison.baseline
            )));
        }
        let first = &self.runs[0];
        for run in &self.runs[1..] {
            if run.dataset != first.dataset {
                return Err(CliError::Usage(format!(
                    "run {:?} uses a different dataset; comparisons need one dataset",
                    run.name
                )));
            }
            if run.eval != first.eval {
                return Err(CliError::Usage(format!(
                    "run {:?} uses different evaluation seeds; comparisons need shared ones",
                    run.name
                )));
            }
        }
        Ok(())
    }
}

/// Speedup accounting for one run against the baseline curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupEntry {
    pub run: String,
    pub iterations: u64,
    pub final_value: f64,
    /// First baseline iteration whose metric is at or below `final_value`.
    pub baseline_match_iteration: Option<u64>,
    pub baseline_reached: bool,
    /// Baseline iterations to match, divided by this run's iterations. When
    /// the baseline never matches, its total iteration count is used as a
    /// lower bound.
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub baseline: String,
    pub metric: String,
    pub entries: Vec<SpeedupEntry>,
}

pub struct ComparisonOutput {
    pub csv: String,
    pub summary: ComparisonSummary,
}

/// Execute (or reuse) every run in the plan and assemble the comparison.
pub fn run_plan(plan: &ExperimentPlan, workers: usize) -> Result<ComparisonOutput, CliError> {
    let mut logs: Vec<(String, ConvergenceLog, u64)> = Vec::with_capacity(plan.runs.len());
    for cfg in &plan.runs {
        let dir = plan.output_dir.join(&cfg.name);
        let log = load_or_train(cfg, &dir, workers)?;
        logs.push((cfg.name.clone(), log, cfg.headline_iterations()));
    }

    let metric = &plan.comparison.metric;
    let mut csv = String::from("run,iteration,metric,value\n");
    for (name, log, _) in &logs {
        for row in &log.rows {
            if row.tau.is_none() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    name, row.iteration, row.metric, row.value
                ));
            }
        }
    }

    let (_, baseline_log, baseline_iters) = logs
        .iter()
        .find(|(name, _, _)| *name == plan.comparison.baseline)
        .expect("validated baseline membership");
    let baseline_curve = baseline_log.metric_curve(metric);
    if baseline_curve.is_empty() {
        return Err(CliError::Usage(format!(
            "baseline run logged no {metric:?} values; set eval_every > 0"
        )));
    }

    let mut entries = Vec::new();
    for (name, log, iterations) in &logs {
        let is_baseline = *name == plan.comparison.baseline;
        let curve = log.metric_curve(metric);
        let Some(&(_, final_value)) = curve.last() else {
            return Err(CliError::Usage(format!(
                "run {name:?} logged no {metric:?} values; set eval_every > 0"
            )));
        };
        let entry = if is_baseline {
            // A run measured against itself is the unit of comparison.
            SpeedupEntry {
                run: name.clone(),
                iterations: *iterations,
                final_value,
                baseline_match_iteration: Some(*baseline_iters),
                baseline_reached: true,
                speedup: 1.0,
            }
        } else {
            let matched = baseline_curve
                .iter()
                .find(|(_, v)| *v <= final_value)
                .map(|(it, _)| *it);
            let (reached, numerator) = match matched {
                Some(it) => (true, it),
                None => (false, *baseline_iters),
            };
            SpeedupEntry {
                run: name.clone(),
                iterations: *iterations,
                final_value,
                baseline_match_iteration: matched,
                baseline_reached: reached,
                speedup: numerator as f64 / (*iterations).max(1) as f64,
            }
        };
        entries.push(entry);
    }

    Ok(ComparisonOutput {
        csv,
        summary: ComparisonSummary {
            baseline: plan.comparison.baseline.clone(),
            metric: metric.clone(),
            entries,
        },
    })
}

fn load_or_train(cfg: &RunConfig, dir: &Path, workers: usize) -> Result<ConvergenceLog, CliError> {
    if dir.join(RUN_MANIFEST).exists() {
        let manifest = load_manifest(dir)?;
        if manifest.config == *cfg {
            eprintln!("reusing existing run {:?}", cfg.name);
            return load_log(dir);
        }
        return Err(CliError::Usage(format!(
            "run directory {} holds a different config; remove it or rename the run",
            dir.display()
        )));
    }
    eprintln!("training run {:?}", cfg.name);
    execute_run(cfg, dir, workers)
}

/// Persist the merged table and summary into the plan's output directory.
pub fn write_outputs(plan: &ExperimentPlan, output: &ComparisonOutput) -> Result<(), CliError> {
    write_text(&plan.output_dir.join("comparison.csv"), &output.csv)?;
    write_text(
        &plan.output_dir.join("summary.json"),
        &serde_json::to_string_pretty(&output.summary).expect("summary serializes"),
    )?;
    Ok(())
}
