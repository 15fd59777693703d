//! End-to-end smoke test of every CLI path, driving the real binary on tiny
//! configurations. The whole file finishes well under a minute.

use std::path::Path;
use std::process::{Command, Output};

fn tspace(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tspace"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_exit(output: &Output, code: i32, context: &str) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "{context}: stdout={} stderr={}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_cli_lifecycle() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // schedule dump: paper table rows, exit 0.
    let out = tspace(
        &["schedule", "dump", "--kind", "linear", "--T", "1000", "--taus", "4"],
        dir,
    );
    assert_exit(&out, 0, "schedule dump");
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,beta,alpha_bar,snr");
    let ts: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ts, vec!["249", "499", "749", "999"]);
    // Decimal output round-trips to identical 64-bit values.
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        let beta: f64 = fields[1].parse().unwrap();
        assert_eq!(format!("{beta}"), fields[1]);
        let alpha: f64 = fields[2].parse().unwrap();
        assert_eq!(format!("{alpha}"), fields[2]);
    }

    // Usage errors exit 2.
    assert_exit(&tspace(&["schedule", "dump", "--T", "0"], dir), 2, "T=0");
    assert_exit(
        &tspace(&["schedule", "dump", "--kind", "cubic"], dir),
        2,
        "bad kind",
    );
    assert_exit(&tspace(&["schedule"], dir), 2, "missing action");

    // dataset dump.
    let out = tspace(
        &["dataset", "dump", "--kind", "ring-mixture", "--n", "64", "--seed", "7"],
        dir,
    );
    assert_exit(&out, 0, "dataset dump");
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x,y,label");
    assert_eq!(text.lines().count(), 65);
    assert_exit(
        &tspace(&["dataset", "dump", "--kind", "nonsense"], dir),
        2,
        "bad dataset kind",
    );

    // train: tiny baseline run.
    let baseline_cfg = r#"{
        "name": "smoke-baseline",
        "dataset": {"kind": "std-gaussian"},
        "schedule": {"kind": "linear-beta", "t_count": 50, "beta_start": 0.001, "beta_end": 0.05},
        "regime": "baseline",
        "batch_size": 16,
        "iterations": 60,
        "lr": 0.001,
        "eval_every": 30,
        "eval": {"samples": 200, "n_proj": 16, "sampler_steps": 8},
        "run_seed": 1,
        "model": {"hidden": [16], "time_embed_dim": 8}
    }"#;
    write(&dir.join("baseline.json"), baseline_cfg);
    let out = tspace(
        &["train", "--config", "baseline.json", "--out", "run-baseline"],
        dir,
    );
    assert_exit(&out, 0, "train baseline");
    assert!(dir.join("run-baseline/manifest.json").exists());
    assert!(dir.join("run-baseline/convergence.csv").exists());
    assert!(dir.join("run-baseline/all.weights.bin").exists());

    // Training twice produces byte-identical weights.
    let out = tspace(
        &["train", "--config", "baseline.json", "--out", "run-baseline-2"],
        dir,
    );
    assert_exit(&out, 0, "train baseline again");
    assert_eq!(
        std::fs::read(dir.join("run-baseline/all.weights.bin")).unwrap(),
        std::fs::read(dir.join("run-baseline-2/all.weights.bin")).unwrap()
    );

    // train: tiny per-timestep run with a labelled dataset and conditioning.
    let disent_cfg = r#"{
        "name": "smoke-disent",
        "dataset": {"kind": "ring-mixture", "modes": 4, "radius": 2.0, "component_std": 0.2},
        "schedule": {"kind": "linear-beta", "t_count": 50, "beta_start": 0.001, "beta_end": 0.05},
        "regime": "disentangled",
        "s": 3,
        "batch_size": 16,
        "iterations": 40,
        "lr": 0.001,
        "eval_every": 0,
        "eval": {"samples": 0},
        "run_seed": 2,
        "model": {"hidden": [16], "time_embed_dim": 0, "label_dim": 4}
    }"#;
    write(&dir.join("disent.json"), disent_cfg);
    let out = tspace(
        &["train", "--config", "disent.json", "--out", "run-disent", "--workers", "2"],
        dir,
    );
    assert_exit(&out, 0, "train disentangled");
    // One checkpoint per subsequence state.
    let manifests = std::fs::read_dir(dir.join("run-disent"))
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name();
            let name = name.to_string_lossy();
            name.starts_with('t') && name.ends_with(".manifest.json")
        })
        .count();
    assert_eq!(manifests, 3);

    // Config schema errors exit 2.
    let bad_cfg = disent_cfg.replace("\"s\": 3", "\"s\": 3, \"iterations_per_tau\": [10, 10]");
    let bad_cfg = bad_cfg.replace("\"iterations\": 40,", "");
    write(&dir.join("bad.json"), &bad_cfg);
    let out = tspace(&["train", "--config", "bad.json", "--out", "run-bad"], dir);
    assert_exit(&out, 2, "iteration vector length mismatch");

    // Numeric failure exits 3 and names the iteration.
    let nan_cfg = baseline_cfg
        .replace("\"lr\": 0.001", "\"lr\": 1e200")
        .replace("smoke-baseline", "smoke-nan");
    write(&dir.join("nan.json"), &nan_cfg);
    let out = tspace(&["train", "--config", "nan.json", "--out", "run-nan"], dir);
    assert_exit(&out, 3, "nan guard");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("iteration"),
        "stderr names the failing iteration"
    );

    // sample: all four modes.
    for (mode, extra) in [
        ("ddim", vec!["--steps", "4"]),
        ("ddpm-full", vec![]),
        ("generalized-full", vec!["--sigma-rule", "ddpm-match"]),
    ] {
        let out_name = format!("samples-{mode}.csv");
        let mut args = vec![
            "sample",
            "--run",
            "run-baseline",
            "--mode",
            mode,
            "--n",
            "50",
            "--seed",
            "9",
            "--out",
            &out_name,
        ];
        args.extend(extra);
        let out = tspace(&args, dir);
        assert_exit(&out, 0, &format!("sample {mode}"));
        let text = std::fs::read_to_string(dir.join(&out_name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "sample_id,x,y");
        assert_eq!(text.lines().count(), 51);
        let sidecar = dir.join(format!("samples-{mode}.meta.json"));
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
        assert!(sidecar["schedule_fingerprint"].is_u64());
    }
    let out = tspace(
        &[
            "sample", "--run", "run-disent", "--mode", "disentangled", "--steps", "3",
            "--n", "40", "--seed", "3", "--label", "1", "--out", "samples-disent.csv",
        ],
        dir,
    );
    assert_exit(&out, 0, "sample disentangled");

    // Sampling a disentangled run in a shared-model mode is refused.
    let out = tspace(
        &[
            "sample", "--run", "run-disent", "--mode", "ddim", "--steps", "3", "--n", "10",
            "--seed", "1", "--out", "bad.csv",
        ],
        dir,
    );
    assert_exit(&out, 2, "mode/regime mismatch");

    // eval: report on a sample file, then append into the convergence log.
    let out = tspace(
        &["eval", "--run", "run-baseline", "--samples", "samples-ddim.csv"],
        dir,
    );
    assert_exit(&out, 0, "eval");
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("eval emits a JSON report");
    assert!(report["sliced_wasserstein"].as_f64().unwrap() >= 0.0);
    assert!(report["energy_distance"].as_f64().unwrap() >= 0.0);
    let before = std::fs::read_to_string(dir.join("run-baseline/convergence.csv")).unwrap();
    let out = tspace(
        &[
            "eval", "--run", "run-baseline", "--samples", "samples-ddim.csv", "--iteration",
            "60",
        ],
        dir,
    );
    assert_exit(&out, 0, "eval --iteration");
    let after = std::fs::read_to_string(dir.join("run-baseline/convergence.csv")).unwrap();
    assert!(after.lines().count() > before.lines().count());

    // compare: two tiny runs, merged CSV and summary.
    let plan = r#"{
        "output_dir": "cmp",
        "comparison": {"baseline": "a"},
        "runs": [
            {
                "name": "a",
                "dataset": {"kind": "ring-mixture", "modes": 4, "radius": 2.0, "component_std": 0.2},
                "schedule": {"kind": "linear-beta", "t_count": 50, "beta_start": 0.001, "beta_end": 0.05},
                "regime": "baseline",
                "batch_size": 16,
                "iterations": 80,
                "lr": 0.001,
                "eval_every": 20,
                "eval": {"samples": 300, "n_proj": 16, "sampler_steps": 8},
                "run_seed": 4,
                "model": {"hidden": [16], "time_embed_dim": 8}
            },
            {
                "name": "b",
                "dataset": {"kind": "ring-mixture", "modes": 4, "radius": 2.0, "component_std": 0.2},
                "schedule": {"kind": "linear-beta", "t_count": 50, "beta_start": 0.001, "beta_end": 0.05},
                "regime": "fewer",
                "s": 8,
                "batch_size": 16,
                "iterations": 80,
                "lr": 0.001,
                "eval_every": 20,
                "eval": {"samples": 300, "n_proj": 16, "sampler_steps": 8},
                "run_seed": 4,
                "model": {"hidden": [16], "time_embed_dim": 8}
            }
        ]
    }"#;
    write(&dir.join("plan.json"), plan);
    let out = tspace(&["compare", "--plan", "plan.json"], dir);
    assert_exit(&out, 0, "compare");
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let entries = summary["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let a_entry = entries.iter().find(|e| e["run"] == "a").unwrap();
    assert_eq!(a_entry["speedup"].as_f64().unwrap(), 1.0);

    let csv = std::fs::read_to_string(dir.join("cmp/comparison.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "run,iteration,metric,value");
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4, "line {line:?}");
        let value: f64 = fields[3].parse().unwrap();
        assert!(!value.is_nan(), "NaN in comparison CSV: {line:?}");
    }
    assert!(dir.join("cmp/summary.json").exists());

    // A single-run plan compares a run against itself at speedup 1.0.
    let solo_plan = r#"{
        "output_dir": "cmp-solo",
        "comparison": {"baseline": "a"},
        "runs": [
            {
                "name": "a",
                "dataset": {"kind": "std-gaussian"},
                "schedule": {"kind": "linear-beta", "t_count": 50, "beta_start": 0.001, "beta_end": 0.05},
                "regime": "baseline",
                "batch_size": 16,
                "iterations": 40,
                "lr": 0.001,
                "eval_every": 20,
                "eval": {"samples": 200, "n_proj": 16, "sampler_steps": 8},
                "run_seed": 5,
                "model": {"hidden": [16], "time_embed_dim": 8}
            }
        ]
    }"#;
    write(&dir.join("solo.json"), solo_plan);
    let out = tspace(&["compare", "--plan", "solo.json"], dir);
    assert_exit(&out, 0, "solo compare");
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["entries"][0]["speedup"].as_f64().unwrap(), 1.0);

    // Mismatched comparison invariants are refused.
    let bad_plan = plan.replace(
        r#""dataset": {"kind": "ring-mixture", "modes": 4, "radius": 2.0, "component_std": 0.2},
                "schedule": {"kind": "linear-beta", "t_count": 50, "beta_start": 0.001, "beta_end": 0.05},
                "regime": "fewer""#,
        r#""dataset": {"kind": "std-gaussian"},
                "schedule": {"kind": "linear-beta", "t_count": 50, "beta_start": 0.001, "beta_end": 0.05},
                "regime": "fewer""#,
    );
    assert_ne!(bad_plan, plan, "replacement must apply");
    write(&dir.join("bad-plan.json"), &bad_plan);
    let out = tspace(&["compare", "--plan", "bad-plan.json"], dir);
    assert_exit(&out, 2, "mismatched plan datasets");
}
