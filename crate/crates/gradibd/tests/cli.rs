//! End-to-end checks of the gradibd binary: pipeline wiring, exit codes,
//! and artifact determinism across thread counts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_gradibd");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "d_node = 2\nd_graph = 4\ndepth = 1\nd_hidden = 3\nfolds = 2\nmax_epochs = 2\nbatch_size = 4\nseed = 3\n",
    )
    .expect("write config");
    path
}

fn gen_cohort(dir: &Path, name: &str, n: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    run_ok(&[
        "gen-cohort",
        "--out",
        path_str(&path),
        "--n",
        &n.to_string(),
        "--case-frac",
        "0.3",
        "--seed",
        &seed.to_string(),
    ]);
    path
}

#[test]
fn gen_cohort_writes_records_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 25, 7);
    let text = fs::read_to_string(&cohort).unwrap();
    assert_eq!(text.lines().count(), 25);
    for line in text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(row.get("patient_id").is_some());
        assert!(row.get("visits").is_some());
    }
    let manifest = fs::read_to_string(tmp.path().join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["seed"], 7);
}

#[test]
fn encode_dumps_graphs_vocab_and_matrices() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 10, 11);
    let out = tmp.path().join("enc");
    let matrices = tmp.path().join("mat");
    run_ok(&[
        "encode",
        "--cohort",
        path_str(&cohort),
        "--out",
        path_str(&out),
        "--dump-matrix",
        path_str(&matrices),
    ]);
    let graphs = fs::read_to_string(out.join("graphs.jsonl")).unwrap();
    assert_eq!(graphs.lines().count(), 10);
    let row: serde_json::Value = serde_json::from_str(graphs.lines().next().unwrap()).unwrap();
    assert_eq!(row["graph"]["version"], 1);
    assert!(row["stats"]["n_nodes"].as_u64().unwrap() > 0);
    assert!(out.join("vocab.txt").exists());
    assert!(out.join("manifest.json").exists());
    let csv = fs::read_to_string(matrices.join("p000000.csv")).unwrap();
    assert!(csv.starts_with("code_id,bucket_index,frequency\n"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn train_then_eval_round_trips_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "train.jsonl", 30, 5);
    let test = gen_cohort(tmp.path(), "test.jsonl", 12, 6);
    let config = write_tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--cohort",
        path_str(&cohort),
        "--config",
        path_str(&config),
        "--out",
        path_str(&run_dir),
    ]);
    assert!(run_dir.join("fold_0.ckpt").exists());
    assert!(run_dir.join("fold_1.ckpt").exists());
    let trace = fs::read_to_string(run_dir.join("trace_0.csv")).unwrap();
    assert!(trace.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(trace.lines().count(), 3);

    let report_path = tmp.path().join("evalout/report.json");
    let out = run_ok(&[
        "eval",
        "--checkpoints",
        path_str(&run_dir),
        "--test",
        path_str(&test),
        "--out",
        path_str(&report_path),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("auroc:"), "stdout: {stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 2);
    let scores = fs::read_to_string(report_path.parent().unwrap().join("fold_0_scores.csv")).unwrap();
    assert!(scores.starts_with("patient_id,label,score\n"));
    assert_eq!(scores.lines().count(), 13);
}

#[test]
fn config_set_overrides_file_values() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 20, 8);
    let config = write_tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--cohort",
        path_str(&cohort),
        "--config",
        path_str(&config),
        "--out",
        path_str(&run_dir),
        "--set",
        "max_epochs=1",
    ]);
    let trace = fs::read_to_string(run_dir.join("trace_0.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn artifacts_are_bit_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 24, 13);
    let config = write_tiny_config(tmp.path());
    let dirs = ["j1", "j3"];
    for (jobs, dir) in ["1", "3"].iter().zip(dirs) {
        run_ok(&[
            "--jobs",
            jobs,
            "train",
            "--cohort",
            path_str(&cohort),
            "--config",
            path_str(&config),
            "--out",
            path_str(&tmp.path().join(dir)),
        ]);
    }
    for file in ["fold_0.ckpt", "fold_1.ckpt", "trace_0.csv", "trace_1.csv", "vocab.txt"] {
        let a = fs::read(tmp.path().join(dirs[0]).join(file)).unwrap();
        let b = fs::read(tmp.path().join(dirs[1]).join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between --jobs 1 and --jobs 3");
    }
}

#[test]
fn ablate_emits_requested_grid_rows() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 30, 17);
    let config = write_tiny_config(tmp.path());
    let out = tmp.path().join("ab/ablation.csv");
    run_ok(&[
        "ablate",
        "--grid",
        "td",
        "--cohort",
        path_str(&cohort),
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,cs,cf,td,auroc_mean,auroc_ci_lo,auroc_ci_hi,ap_mean,ap_ci_lo,ap_ci_hi,f1_mean,f1_ci_lo,f1_ci_hi");
    assert_eq!(lines.len(), 3);
    assert!(tmp.path().join("ab/manifest.json").exists());
}

#[test]
fn sweep_emits_one_row_per_lead_and_metric() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 30, 19);
    let config = write_tiny_config(tmp.path());
    let out = tmp.path().join("sw/sweep.csv");
    run_ok(&[
        "sweep",
        "--leads",
        "30,90",
        "--cohort",
        path_str(&cohort),
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lead_days,metric,mean,ci_lo,ci_hi");
    assert_eq!(lines.len(), 7);
    assert_eq!(lines.iter().filter(|l| l.starts_with("30,")).count(), 3);
    assert_eq!(lines.iter().filter(|l| l.starts_with("90,")).count(), 3);
}

#[test]
fn flops_reports_parameter_and_flop_counts() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 10, 23);
    let config = write_tiny_config(tmp.path());
    let out = run_ok(&[
        "flops",
        "--config",
        path_str(&config),
        "--cohort",
        path_str(&cohort),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("parameters:"), "stdout: {stdout}");
    assert!(stdout.contains("mean FLOPs per forward pass:"), "stdout: {stdout}");
    assert!(stdout.contains("comparison only, not asserted"), "stdout: {stdout}");
}

#[test]
fn selftest_passes_and_exits_zero() {
    let out = run_ok(&["selftest", "--seed", "41"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("PASS ").count(), 6, "stdout: {stdout}");
    assert!(stdout.contains("all 6 checks passed"), "stdout: {stdout}");
}

#[test]
fn missing_required_flag_exits_one() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let out = run(&["train", "--config", path_str(&config), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("ERROR MissingFlag:"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("ERROR UnknownCommand:"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_flag_exits_one() {
    let out = run(&["selftest", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("ERROR UnknownFlag:"), "stderr: {}", stderr_of(&out));
}

#[test]
fn missing_cohort_file_exits_two() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path());
    let out = run(&[
        "train",
        "--cohort",
        "/definitely/not/here.jsonl",
        "--config",
        path_str(&config),
        "--out",
        path_str(&tmp.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).starts_with("ERROR Cohort:"), "stderr: {}", stderr_of(&out));
}

#[test]
fn bad_config_key_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cohort = gen_cohort(tmp.path(), "c.jsonl", 10, 29);
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "no_such_key = 5\n").unwrap();
    let out = run(&[
        "train",
        "--cohort",
        path_str(&cohort),
        "--config",
        path_str(&bad),
        "--out",
        path_str(&tmp.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).starts_with("ERROR Config:"), "stderr: {}", stderr_of(&out));
}

#[test]
fn help_and_version_exit_zero() {
    let help = run_ok(&["--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-cohort"));
    let version = run_ok(&["--version"]);
    let text = String::from_utf8_lossy(&version.stdout);
    assert!(text.contains("checkpoint format v1"), "stdout: {text}");
}
