//! `tspace`: train, sample and evaluate small diffusion models on 2-D toy
//! data, comparing full-T training against subsequence and per-timestep
//! training regimes.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numeric failure during
//! training, 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tspace_core::dataset::{sample_batch, ToyDistribution};
use tspace_core::metrics::evaluate;
use tspace_core::sampler::{SamplerMode, SamplerSpec, SigmaRule};
use tspace_core::schedule::{NoiseSchedule, ScheduleKind};
use tspace_core::trainer::{LogRow, RunConfig};

use tspace_cli::compare::{self, ExperimentPlan};
use tspace_cli::output::{
    self, dataset_csv, emit, read_text, samples_csv, schedule_csv, write_text,
};
use tspace_cli::runs::{execute_run, load_log, load_manifest, run_sampler, CONVERGENCE_CSV};
use tspace_cli::CliError;

#[derive(Parser)]
#[command(
    name = "tspace",
    version,
    about = "A 2-D diffusion laboratory comparing training regimes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect noise schedules
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
    /// Inspect toy datasets
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train a run config into a run directory
    Train(TrainArgs),
    /// Sample from a trained run
    Sample(SampleArgs),
    /// Evaluate a sample file against a run's data distribution
    Eval(EvalArgs),
    /// Train and compare a set of runs from an experiment plan
    Compare(CompareArgs),
}

#[derive(Subcommand)]
enum ScheduleAction {
    /// Emit the schedule table as CSV (t, beta, alpha_bar, snr)
    Dump(ScheduleDumpArgs),
}

#[derive(Args)]
struct ScheduleDumpArgs {
    /// Schedule kind: linear | scaled-linear
    #[arg(long, default_value = "linear")]
    kind: String,
    /// Number of base timesteps
    #[arg(long = "T", default_value_t = 1000)]
    t: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    beta_end: f64,
    /// Restrict rows to the latent subsequence of this length
    #[arg(long)]
    taus: Option<usize>,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Emit samples as CSV (x, y, label)
    Dump(DatasetDumpArgs),
}

#[derive(Args)]
struct DatasetDumpArgs {
    /// Distribution: std-gaussian | ring-mixture | swiss-roll | checkerboard
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    modes: usize,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.15)]
    component_std: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 4)]
    cells: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to a JSON run config
    #[arg(long)]
    config: PathBuf,
    /// Run directory (default: runs/<name>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-timestep training (default: TSPACE_WORKERS or
    /// the available parallelism)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    /// Run directory produced by `train`
    #[arg(long)]
    run: PathBuf,
    /// ddpm-full | generalized-full | ddim | disentangled
    #[arg(long)]
    mode: String,
    /// Inference subsequence length for ddim / disentangled modes
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class label for conditional models
    #[arg(long)]
    label: Option<usize>,
    /// Noise rule for generalized-full: zero | ddpm-match
    #[arg(long, default_value = "zero")]
    sigma_rule: String,
    /// Noise scale interpolation factor (overrides --sigma-rule)
    #[arg(long)]
    eta: Option<f64>,
    /// Sample even when the registry was trained under another schedule
    #[arg(long, default_value_t = false)]
    allow_fingerprint_mismatch: bool,
    /// Output CSV path; a .meta.json sidecar lands next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory carrying the data distribution and metric seeds
    #[arg(long)]
    run: PathBuf,
    /// Sample CSV produced by `sample`
    #[arg(long)]
    samples: PathBuf,
    /// Reference sample count (default: as many as the generated set)
    #[arg(long)]
    n_reference: Option<usize>,
    /// Append the report to the run's convergence log under this iteration
    #[arg(long)]
    iteration: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Path to a JSON experiment plan
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Schedule {
            action: ScheduleAction::Dump(args),
        } => cmd_schedule_dump(args),
        Command::Dataset {
            action: DatasetAction::Dump(args),
        } => cmd_dataset_dump(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn parse_kind(kind: &str) -> Result<ScheduleKind, CliError> {
    match kind {
        "linear" | "linear-beta" => Ok(ScheduleKind::LinearBeta),
        "scaled-linear" | "scaled-linear-beta" => Ok(ScheduleKind::ScaledLinearBeta),
        other => Err(CliError::Usage(format!(
            "unknown schedule kind {other:?} (expected linear or scaled-linear)"
        ))),
    }
}

fn worker_count(flag: Option<usize>) -> usize {
    if let Some(w) = flag {
        return w.max(1);
    }
    if let Ok(env) = std::env::var("TSPACE_WORKERS") {
        if let Ok(w) = env.parse::<usize>() {
            return w.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn cmd_schedule_dump(args: ScheduleDumpArgs) -> Result<(), CliError> {
    let kind = parse_kind(&args.kind)?;
    let schedule = NoiseSchedule::build(kind, args.t, args.beta_start, args.beta_end)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let taus = match args.taus {
        None => None,
        Some(s) => {
            let sub = schedule
                .select_taus(s)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            if sub.source() == tspace_core::schedule::TauSource::PaperTableReconstructed {
                eprintln!(
                    "note: the 64-state table is reconstructed (entries 264 and 514 are interpolated)"
                );
            }
            Some(sub)
        }
    };
    emit(args.out.as_deref(), &schedule_csv(&schedule, taus.as_ref()))
}

fn cmd_dataset_dump(args: DatasetDumpArgs) -> Result<(), CliError> {
    let dist = match args.kind.as_str() {
        "std-gaussian" => ToyDistribution::StdGaussian,
        "ring-mixture" => ToyDistribution::RingMixture {
            modes: args.modes,
            radius: args.radius,
            component_std: args.component_std,
        },
        "swiss-roll" => ToyDistribution::SwissRoll {
            noise_std: args.noise_std,
        },
        "checkerboard" => ToyDistribution::Checkerboard { cells: args.cells },
        other => {
            return Err(CliError::Usage(format!(
                "unknown dataset kind {other:?}"
            )))
        }
    };
    let samples =
        sample_batch(&dist, args.n, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    emit(args.out.as_deref(), &dataset_csv(&samples))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let text = read_text(&args.config)?;
    let cfg = RunConfig::from_json(&text).map_err(CliError::from_train)?;
    let dir = args
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let workers = worker_count(args.workers);
    execute_run(&cfg, &dir, workers)?;
    eprintln!("run {:?} finished into {}", cfg.name, dir.display());
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.run)?;
    let schedule = manifest
        .config
        .schedule
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mode = match args.mode.as_str() {
        "ddpm-full" => SamplerMode::DdpmFull,
        "generalized-full" => {
            let sigma_rule = match (args.eta, args.sigma_rule.as_str()) {
                (Some(eta), _) => {
                    if !(0.0..=1.0).contains(&eta) {
                        return Err(CliError::Usage(format!("eta {eta} outside [0, 1]")));
                    }
                    SigmaRule::Eta { eta }
                }
                (None, "zero") => SigmaRule::Zero,
                (None, "ddpm-match") => SigmaRule::DdpmMatch,
                (None, other) => {
                    return Err(CliError::Usage(format!("unknown sigma rule {other:?}")))
                }
            };
            SamplerMode::GeneralizedFull { sigma_rule }
        }
        "ddim" | "ddim-subseq" => SamplerMode::DdimSubseq,
        "disentangled" => SamplerMode::Disentangled,
        other => return Err(CliError::Usage(format!("unknown sampler mode {other:?}"))),
    };
    let inference_taus = match mode {
        SamplerMode::DdimSubseq | SamplerMode::Disentangled => Some(
            schedule
                .select_taus(args.steps)
                .map_err(|e| CliError::Usage(e.to_string()))?,
        ),
        _ => None,
    };
    let spec = SamplerSpec {
        mode,
        inference_taus,
        noise_seed: args.seed,
        n_samples: args.n,
        label: args.label,
        allow_fingerprint_mismatch: args.allow_fingerprint_mismatch,
    };
    let outcome = run_sampler(&args.run, &manifest, &schedule, &spec)?;
    write_text(&args.out, &samples_csv(&outcome.points))?;
    let sidecar_path = args.out.with_extension("meta.json");
    write_text(
        &sidecar_path,
        &serde_json::to_string_pretty(&outcome.sidecar).expect("sidecar serializes"),
    )?;
    eprintln!(
        "wrote {} samples to {} (+ {})",
        outcome.points.len(),
        args.out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.run)?;
    let generated = output::parse_samples_csv(&read_text(&args.samples)?)?;
    let n_reference = args.n_reference.unwrap_or(generated.len());
    let eval = manifest.config.eval;
    let reference: Vec<_> = sample_batch(&manifest.config.dataset, n_reference, eval.reference_seed)
        .map_err(|e| CliError::Usage(e.to_string()))?
        .into_iter()
        .map(|s| s.x0)
        .collect();
    let report = evaluate(
        &generated,
        &reference,
        &manifest.config.dataset,
        eval.n_proj,
        eval.metric_seed,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );

    if let Some(iteration) = args.iteration {
        let mut log = load_log(&args.run)?;
        // Post-hoc evaluations have no fresh loss; carry the nearest logged one.
        let loss = log
            .rows
            .iter()
            .rfind(|r| r.iteration <= iteration)
            .or_else(|| log.rows.last())
            .map(|r| r.loss)
            .unwrap_or(0.0);
        let mut push = |metric: &str, value: f64| {
            log.rows.push(LogRow {
                iteration,
                loss,
                metric: metric.into(),
                value,
                tau: None,
            });
        };
        push("sliced_wasserstein", report.sliced_wasserstein);
        push("energy_distance", report.energy_distance);
        if let Some(c) = report.mode_coverage {
            push("mode_coverage", c as f64);
        }
        if let Some(m) = report.min_mode_mass {
            push("min_mode_mass", m);
        }
        write_text(&args.run.join(CONVERGENCE_CSV), &log.to_csv())?;
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let plan = ExperimentPlan::from_json(&read_text(&args.plan)?)?;
    let workers = worker_count(args.workers);
    let output = compare::run_plan(&plan, workers)?;
    compare::write_outputs(&plan, &output)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&output.summary).expect("summary serializes")
    );
    Ok(())
}
