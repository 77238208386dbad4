//! End-to-end tests of the `bcl` binary: exit codes, artifact layout,
//! the validate report, and byte-identical reruns.

use std::path::Path;
use std::process::{Command, Output};

fn bcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn validate_echoes_every_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = bcl(&["validate", "protocl"], dir.path());
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    // The prototype defaults are all visible in the report.
    assert_eq!(report["protocl"]["alpha_init"], 0.7);
    assert_eq!(report["protocl"]["sigma_eps"], 0.05);
    assert_eq!(report["protocl"]["coreset_per_task"], 200);
    assert_eq!(report["dataset"]["protocol"], "class-incremental");
    assert_eq!(report["model"]["layers"], serde_json::json!([784, 200, 200, 128]));
    // So are the variational and sampler defaults.
    assert_eq!(report["vcl"]["lr"], 0.001);
    assert_eq!(report["hmc_cl"]["prior_precision"], 10.0);
    assert_eq!(report["filter"]["stream"]["n1"], 110);
}

#[test]
fn validate_warns_on_unknown_key_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(&cfg, r#"{"experiment": "protocl", "protocl": {"alpha_int": 0.9}}"#);
    let out = bcl(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("unknown key `protocl.alpha_int`"), "got: {text}");
    assert!(text.contains("did you mean `protocl.alpha_init`?"), "got: {text}");
}

#[test]
fn empty_config_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    write(&cfg, "");
    let out = bcl(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cannot parse"), "got: {}", stderr(&out));
}

#[test]
fn missing_dataset_path_fails_validation_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(
        &cfg,
        r#"{"experiment": "protocl", "dataset": {"kind": "split", "path": "/nonexistent/idx"}}"#,
    );
    let run_out = dir.path().join("out");
    let out = bcl(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run_out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does not contain"), "got: {}", stderr(&out));
    assert!(!run_out.exists(), "validation failure must not create artifacts");
}

#[test]
fn bad_flag_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bcl(&["run", "filter", "--seeds", "bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // No experiment anywhere.
    let out = bcl(&["run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no experiment selected"));
    // Unknown subcommand is a usage error (clap's own exit code is 2).
    let out = bcl(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn filter_run_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let args = [
        "run",
        "filter",
        "--scenario",
        "balanced",
        "--seeds",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let out = bcl(&args, dir.path());
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let read = |p: &str| std::fs::read(out_dir.join(p)).unwrap();
    let first: Vec<(String, Vec<u8>)> = [
        "config.resolved.json",
        "aggregate.json",
        "seed-0/trajectory.csv",
        "seed-0/summary.json",
        "seed-1/trajectory.csv",
        "seed-1/summary.json",
    ]
    .iter()
    .map(|p| (p.to_string(), read(p)))
    .collect();

    // The balanced scenario parks near zero: |final mean| within 3 final
    // stds of 0.
    let summary: serde_json::Value =
        serde_json::from_slice(&read("seed-0/summary.json")).unwrap();
    let mean = summary["final_mean"].as_f64().unwrap();
    let std = summary["final_std"].as_f64().unwrap();
    assert!(mean.abs() <= 3.0 * std, "final mean {mean} vs std {std}");

    // Trajectory CSV has the documented header and one row per update.
    let csv = String::from_utf8(read("seed-0/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,observation,post_mean,post_var"));
    assert_eq!(lines.count(), 220);

    // Rerunning the identical plan rewrites identical bytes.
    let out = bcl(&args, dir.path());
    assert!(out.status.success());
    for (p, bytes) in &first {
        assert_eq!(&read(p), bytes, "{p} changed between identical runs");
    }

    // No failure marker on success.
    assert!(!out_dir.join("FAILED.json").exists());
}

#[test]
fn aggregate_reports_mean_and_std_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let out = bcl(
        &[
            "run",
            "filter",
            "--scenario",
            "imbalanced",
            "--seeds",
            "4,5,6",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let agg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["n_seeds"], 3);
    assert_eq!(agg["seeds"], serde_json::json!([4, 5, 6]));
    let m = &agg["metrics"]["final_mean"];
    let values: Vec<f64> =
        m["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(values.len(), 3);
    let mean = values.iter().sum::<f64>() / 3.0;
    assert!((m["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    // The 20/200 stream parks near the majority regime: positive mean.
    assert!(mean > 0.5, "imbalanced final means {values:?}");
    // Per-seed streams differ, so the std is strictly positive.
    assert!(m["std"].as_f64().unwrap() > 0.0);
}

fn tiny_toy_dataset() -> &'static str {
    r#""dataset": {"kind": "toy", "toy": {"n_train_per_class": 16, "n_test_per_class": 12}}"#
}

#[test]
fn hmc_cl_run_writes_chain_and_accuracy_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(
        &cfg,
        &format!(
            r#"{{
  "experiment": "hmc-cl",
  {},
  "model": {{"layers": [2, 4, 1]}},
  "hmc_cl": {{
    "hmc": {{"step_size": 0.05, "n_leapfrog": 4, "n_burn_in": 30, "n_samples": 60, "n_chains": 2}},
    "selection": {{"k_grid": [1, 2], "em": {{"max_iter": 40, "n_restarts": 1}}}},
    "max_pool": 120, "eval_max_samples": 20, "ess_floor": 1.0
  }}
}}"#,
            tiny_toy_dataset()
        ),
    );
    let out_dir = dir.path().join("out");
    let out = bcl(
        &["run", "--config", cfg.to_str().unwrap(), "--seeds", "1", "--out", out_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let seed0 = out_dir.join("seed-0");
    for file in [
        "accuracy.csv",
        "mixture_accuracy.csv",
        "summary.json",
        "task-1.chain",
        "task-5.mixture.json",
        "task-3.diagnostics.json",
    ] {
        assert!(seed0.join(file).exists(), "missing {file}");
    }
    let acc = std::fs::read_to_string(seed0.join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("after_task,eval_task,accuracy\n"));
    // Lower-triangular 5-task matrix: 15 entries.
    assert_eq!(acc.lines().count(), 16);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(seed0.join("summary.json")).unwrap()).unwrap();
    assert!(summary["final_avg_accuracy"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["diagnostics"].as_array().unwrap().len(), 5);
}

#[test]
fn hmc_cl_mixing_failure_leaves_marker_and_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(
        &cfg,
        &format!(
            r#"{{
  "experiment": "hmc-cl",
  {},
  "model": {{"layers": [2, 4, 1]}},
  "hmc_cl": {{
    "hmc": {{"step_size": 0.05, "n_leapfrog": 4, "n_burn_in": 10, "n_samples": 20, "n_chains": 2}},
    "ess_floor": 1e9
  }}
}}"#,
            tiny_toy_dataset()
        ),
    );
    let out_dir = dir.path().join("out");
    let out = bcl(
        &["run", "--config", cfg.to_str().unwrap(), "--seeds", "1", "--out", out_dir.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("mixing failure"), "got: {}", stderr(&out));
    let marker: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("FAILED.json")).unwrap()).unwrap();
    assert_eq!(marker["failed_seeds"][0]["seed"], 0);
    assert!(marker["failed_seeds"][0]["error"]
        .as_str()
        .unwrap()
        .contains("mixing failure"));
    // Partial artifacts are retained alongside the marker.
    assert!(out_dir.join("config.resolved.json").exists());
}

#[test]
fn vcl_multi_head_run_on_toy_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(
        &cfg,
        &format!(
            r#"{{
  "experiment": "vcl",
  {},
  "model": {{"layers": [2, 4, 1]}},
  "vcl": {{"head_mode": "multi", "epochs": 3, "n_mc_train": 2, "n_mc_eval": 4}}
}}"#,
            tiny_toy_dataset()
        ),
    );
    let out_dir = dir.path().join("out");
    let out = bcl(
        &["run", "--config", cfg.to_str().unwrap(), "--seeds", "1", "--out", out_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("seed-0/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["head_mode"], "multi");
    assert_eq!(summary["final_elbo_per_task"].as_array().unwrap().len(), 5);
    assert!(out_dir.join("seed-0/accuracy.csv").exists());
}

#[test]
fn protocl_run_writes_state_and_coreset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(
        &cfg,
        r#"{
  "experiment": "protocl",
  "dataset": {"surrogate": {"n_train_per_class": 25, "n_test_per_class": 10, "dim": 12}},
  "model": {"layers": [12, 10, 6]},
  "protocl": {"embed_dim": 6, "epochs": 2, "coreset_per_task": 8, "batch_size": 32}
}"#,
    );
    let out_dir = dir.path().join("out");
    let out = bcl(
        &["run", "--config", cfg.to_str().unwrap(), "--seeds", "1", "--out", out_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let seed0 = out_dir.join("seed-0");
    let state = std::fs::read_to_string(seed0.join("state.json")).unwrap();
    assert!(state.contains("alpha"));
    let coreset = std::fs::read_to_string(seed0.join("coreset_indices.csv")).unwrap();
    assert!(coreset.starts_with("task,row_index\n"));
    // 5 tasks x 8 points per task.
    assert_eq!(coreset.lines().count(), 41);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(seed0.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["coreset_points"], 40);
}

#[test]
fn diagnostics_run_reports_sampler_health() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(
        &cfg,
        r#"{
  "experiment": "diagnostics",
  "diagnostics": {"dim": 3, "precision": 4.0,
    "hmc": {"step_size": 0.3, "n_leapfrog": 6, "n_burn_in": 100, "n_samples": 400, "n_chains": 2}}
}"#,
    );
    let out_dir = dir.path().join("out");
    let out = bcl(
        &["run", "--config", cfg.to_str().unwrap(), "--seeds", "1", "--out", out_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("seed-0/diagnostics.json")).unwrap())
            .unwrap();
    assert!(report["accept_rate"].as_f64().unwrap() > 0.5);
    assert_eq!(report["total_divergences"], 0);
    // Variance 1/4 target: recovered within half of itself at this budget.
    assert!(report["worst_var_rel_error"].as_f64().unwrap() < 0.5);
    assert!(report["worst_abs_mean"].as_f64().unwrap() < 0.2);
}

#[test]
fn conflicting_config_combinations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    // Prototypes on the toy stream: no class labels.
    write(&cfg, r#"{"experiment": "protocl", "dataset": {"kind": "toy"}}"#);
    let out = bcl(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // Multi-head with an explicitly class-incremental protocol.
    write(
        &cfg,
        r#"{"experiment": "vcl", "dataset": {"kind": "split", "protocol": "class-incremental"},
            "vcl": {"head_mode": "multi"}}"#,
    );
    let out = bcl(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("multi-head"), "got: {}", stderr(&out));
}
