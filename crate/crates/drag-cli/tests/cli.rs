//! Black-box tests of the `drag` binary: every subcommand through real
//! process invocations in temp directories, including the exit-code
//! contract (0 ok, 1 usage, 2 runtime) and byte-identical reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn drag(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drag"));
    cmd.current_dir(dir).env_remove("DRAG_DETERMINISM");
    cmd
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout_of(out),
        stderr_of(out)
    );
}

/// The only directory inside `out`, for commands that create one run dir.
fn single_run_dir(out: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "expected exactly one run dir in {}", out.display());
    entries.pop().unwrap()
}

/// Generates a small separable graph and returns the container file path.
fn generate_graph(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join("gen");
    let run = drag(dir)
        .args(["gen-synthetic", "--n", "60", "--features", "4"])
        .args(["--fraud-ratio", "0.3", "--homophily", "0.9,0.5"])
        .args(["--avg-degree", "6", "--feature-separation", "3.0"])
        .args(["--seed", &seed.to_string(), "--format", "json"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_ok(&run);
    let stdout = stdout_of(&run);
    let path = PathBuf::from(stdout.lines().last().expect("gen prints the graph path").trim());
    assert!(path.is_file(), "generated graph missing at {}", path.display());
    path
}

/// Pinned hyperparameters (no grid search) on one worker; cheap and exact.
fn train_args(dataset: &Path, out: &Path, seed: u64) -> Vec<String> {
    let s = |v: &str| v.to_string();
    vec![
        s("train"),
        s("--dataset"),
        dataset.display().to_string(),
        s("--p"),
        s("40"),
        s("--seed"),
        seed.to_string(),
        s("--reps"),
        s("2"),
        s("--lr"),
        s("0.01"),
        s("--weight-decay"),
        s("0.001"),
        s("--layers"),
        s("1"),
        s("--heads"),
        s("2"),
        s("--jobs"),
        s("1"),
        s("--out"),
        out.display().to_string(),
    ]
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = generate_graph(tmp.path(), 5);

    // Train with everything pinned.
    let train_out = tmp.path().join("train");
    let run = drag(tmp.path()).args(train_args(&graph, &train_out, 5)).output().unwrap();
    assert_ok(&run);
    let stdout = stdout_of(&run);
    assert!(stdout.contains("full"), "summary table missing:\n{stdout}");
    let run_dir = single_run_dir(&train_out);

    for name in ["config.json", "report.json", "checkpoint.json", "timing.json"] {
        assert!(run_dir.join(name).is_file(), "{name} missing from the run dir");
    }
    let report = fs::read_to_string(run_dir.join("report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["mode"], "full");
    assert_eq!(report["per_rep"].as_array().unwrap().len(), 2);
    assert!(report.get("grid_trials").unwrap().is_null(), "pinned run must not search");
    // Wall-clock lives in timing.json only; the metric report stays
    // bit-reproducible.
    assert!(report.get("seconds").is_none());
    let timing = fs::read_to_string(run_dir.join("timing.json")).unwrap();
    assert!(timing.contains("seconds"));

    let checkpoint = run_dir.join("checkpoint.json");

    // Evaluate against the same split.
    let eval_out = tmp.path().join("eval");
    let run = drag(tmp.path())
        .args(["evaluate", "--dataset"])
        .arg(&graph)
        .arg("--checkpoint")
        .arg(&checkpoint)
        .args(["--p", "40", "--seed", "5"])
        .arg("--out")
        .arg(&eval_out)
        .output()
        .unwrap();
    assert_ok(&run);
    let eval_dir = single_run_dir(&eval_out);
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["auc"].is_number());
    assert!(eval["f1_macro"].is_number());
    assert!(stdout_of(&run).contains("auc"));

    // Export all three coefficient families plus predictions.
    let exp_out = tmp.path().join("export");
    let run = drag(tmp.path())
        .args(["export-attention", "--dataset"])
        .arg(&graph)
        .arg("--checkpoint")
        .arg(&checkpoint)
        .arg("--out")
        .arg(&exp_out)
        .output()
        .unwrap();
    assert_ok(&run);
    let exp_dir = single_run_dir(&exp_out);
    for name in ["alpha.csv", "beta.csv", "gamma.csv", "predictions.csv"] {
        assert!(exp_dir.join(name).is_file(), "{name} missing from the export dir");
    }
    let alpha = fs::read_to_string(exp_dir.join("alpha.csv")).unwrap();
    assert!(alpha.starts_with("node_id,layer,relation_or_layer_index,head,coefficient\n"));
    let predictions = fs::read_to_string(exp_dir.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().next(), Some("node_id,probability,label"));
    assert_eq!(predictions.lines().count(), 61, "60 nodes plus the header");
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = generate_graph(tmp.path(), 11);

    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for attempt in 0..2 {
        let out = tmp.path().join(format!("run-{attempt}"));
        let run = drag(tmp.path()).args(train_args(&graph, &out, 11)).output().unwrap();
        assert_ok(&run);
        let dir = single_run_dir(&out);
        reports.push(fs::read(dir.join("report.json")).unwrap());
        checkpoints.push(fs::read(dir.join("checkpoint.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1], "reports differ between identical runs");
    assert_eq!(checkpoints[0], checkpoints[1], "checkpoints differ between identical runs");
}

#[test]
fn determinism_env_var_equals_one_worker() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = generate_graph(tmp.path(), 17);

    let flag_out = tmp.path().join("flag");
    let run = drag(tmp.path()).args(train_args(&graph, &flag_out, 17)).output().unwrap();
    assert_ok(&run);

    // Same invocation without --jobs but with the env var set.
    let env_out = tmp.path().join("env");
    let mut args = train_args(&graph, &env_out, 17);
    let jobs_at = args.iter().position(|a| a == "--jobs").unwrap();
    args.drain(jobs_at..jobs_at + 2);
    let run = drag(tmp.path()).args(args).env("DRAG_DETERMINISM", "1").output().unwrap();
    assert_ok(&run);

    let a = fs::read(single_run_dir(&flag_out).join("report.json")).unwrap();
    let b = fs::read(single_run_dir(&env_out).join("report.json")).unwrap();
    assert_eq!(a, b, "DRAG_DETERMINISM=1 must match --jobs 1");
}

#[test]
fn ablate_covers_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = generate_graph(tmp.path(), 23);

    let out = tmp.path().join("ablate");
    let run = drag(tmp.path())
        .args(["ablate", "--dataset"])
        .arg(&graph)
        .args(["--p", "40", "--seed", "23", "--reps", "1"])
        .args(["--lr", "0.01", "--weight-decay", "0.001", "--layers", "1", "--heads", "2"])
        .args(["--jobs", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_ok(&run);

    let dir = single_run_dir(&out);
    let text = fs::read_to_string(dir.join("ablation.json")).unwrap();
    let reports: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    let modes: Vec<&str> = reports.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(
        modes,
        ["full", "no-relation-types", "no-layer-aggregation", "single-layer"],
        "every variant, in declaration order"
    );
    let timing: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing.len(), 4);
}

#[test]
fn grad_check_passes_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let run = drag(tmp.path())
        .args(["grad-check", "--seed", "0", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_ok(&run);
    assert!(stdout_of(&run).contains("PASS"), "stdout:\n{}", stdout_of(&run));
    assert!(single_run_dir(&out).join("grad_check.json").is_file());
}

#[test]
fn spec_file_drives_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("graph.toml");
    fs::write(
        &spec,
        "nodes = 30\nfeatures = 3\nfraud_ratio = 0.2\nhomophily = [0.8, 0.5]\n\
         informative_relation = 0\nseed = 9\n",
    )
    .unwrap();

    let out = tmp.path().join("gen");
    let run = drag(tmp.path())
        .args(["gen-synthetic", "--spec"])
        .arg(&spec)
        .args(["--format", "json", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_ok(&run);
    let graph = PathBuf::from(stdout_of(&run).lines().last().unwrap().trim());
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&graph).unwrap()).unwrap();
    assert_eq!(parsed["num_nodes"], 30);
    assert_eq!(parsed["relations"].as_array().unwrap().len(), 2);

    // Inline flags conflict with --spec; clap must reject the mix.
    let run = drag(tmp.path())
        .args(["gen-synthetic", "--spec"])
        .arg(&spec)
        .args(["--n", "10"])
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(1), "flag conflict must be a usage error");
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown flag: usage error.
    let run = drag(tmp.path()).args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(run.status.code(), Some(1));

    // Help: success.
    let run = drag(tmp.path()).arg("--help").output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert!(stdout_of(&run).contains("train"));

    // Missing dataset: runtime error with a cause chain on stderr.
    let out = tmp.path().join("missing");
    let run = drag(tmp.path())
        .args(["train", "--dataset", "does-not-exist", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr_of(&run).starts_with("error:"), "stderr:\n{}", stderr_of(&run));

    // The config echo must already be on disk even though the run failed.
    let dir = single_run_dir(&out);
    assert!(dir.join("config.json").is_file());
    assert!(!dir.join("report.json").exists());
}
