//! End-to-end checks of the gradnet binary: exit codes, artifacts, and the
//! report/inspect/sweep surfaces, all on tiny synthetic data.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gradnet");

fn gradnet(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
            "dataset": {{"name": "synth", "synth": {{"n": 120, "d": 4, "k": 2}}, "val_fraction": 0.25}},
            "model": [
                {{"type": "flatten"}},
                {{"type": "dense", "units": 8}},
                {{"type": "grelu"}},
                {{"type": "dense_head"}}
            ],
            "schedule": {{"tau": 2, "mode": "epoch"}},
            "optimizer": {{"lr": 0.01}},
            "batch_size": 30,
            "max_epochs": 10,
            "seed": 9{extra}
        }}"#
    );
    std::fs::write(&path, text).expect("write config");
    path
}

#[test]
fn train_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let out = dir.path().join("run");
    let res = gradnet(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("epoch"), "progress lines expected, got: {stdout}");
    for artifact in ["metrics.csv", "run.json", "config.json", "snapshot.bin"] {
        assert!(out.join(artifact).is_file(), "{artifact} missing");
    }
}

#[test]
fn train_missing_config_exits_one() {
    let res = gradnet(&["train", "--config", "/nonexistent/nope.json"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!res.stderr.is_empty());
}

#[test]
fn train_rejects_bad_config_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"dataset": {"name": "synth"}, "unknown_field": 1}"#).unwrap();
    let res = gradnet(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn diverged_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // An absurd learning rate overflows the logits immediately.
    let config = tiny_config(dir.path(), r#", "timing": false"#);
    let text = std::fs::read_to_string(&config).unwrap().replace("\"lr\": 0.01", "\"lr\": 1e308");
    std::fs::write(&config, text).unwrap();
    let res = gradnet(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "stdout: {}", String::from_utf8_lossy(&res.stdout));
}

#[test]
fn unknown_flag_exits_one() {
    let res = gradnet(&["train", "--definitely-not-a-flag"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let res = gradnet(&["--help"]);
    assert_eq!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stdout).contains("sweep"));
}

#[test]
fn sweep_runs_grid_and_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let out = dir.path().join("sweep");
    let res = gradnet(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--vary",
        "schedule.tau=1,2",
        "--vary",
        "optimizer.lr=0.01,0.02",
        "--seeds",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).expect("summary exists");
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "schedule.tau,optimizer.lr,seed,status,best_epoch,best_val_acc,final_g,param_count"
    );
    assert_eq!(lines.count(), 8, "2 taus x 2 lrs x 2 seeds");
    // Deterministic runs: repeated cells in a fresh sweep reproduce bitwise.
    let rerun = gradnet(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--vary",
        "schedule.tau=1,2",
        "--vary",
        "optimizer.lr=0.01,0.02",
        "--seeds",
        "2",
        "--out",
        dir.path().join("sweep2").to_str().unwrap(),
    ]);
    assert_eq!(rerun.status.code(), Some(0));
    let summary2 = std::fs::read_to_string(dir.path().join("sweep2/summary.csv")).unwrap();
    assert_eq!(summary, summary2);
}

#[test]
fn sweep_rejects_bad_axis() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let res = gradnet(&["sweep", "--config", config.to_str().unwrap(), "--vary", "no-equals-sign"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn report_aggregates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let runs = dir.path().join("runs");
    for seed in ["3", "4"] {
        let out = runs.join(format!("seed{seed}"));
        let res = gradnet(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(res.status.code(), Some(0));
    }
    let res = gradnet(&["report", "--runs", runs.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let text = String::from_utf8_lossy(&res.stdout);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run,status,epoch,g,train_loss,train_acc,val_loss,val_acc,wall_seconds"
    );
    assert_eq!(lines.count(), 20, "2 runs x 10 epochs");
    assert!(text.contains("seed3,completed,"));
}

#[test]
fn report_on_empty_dir_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let res = gradnet(&["report", "--runs", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn gradcheck_exits_zero() {
    let res = gradnet(&["gradcheck"]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("PASS"));
}

#[test]
fn inspect_reports_idx_stats() {
    let dir = tempfile::tempdir().unwrap();
    // Fabricate a 4-example IDX pair through the public writer.
    let pixels: Vec<f64> = (0..4 * 6 * 6).map(|i| f64::from((i % 256) as u8) / 255.0).collect();
    let ds = gradnet_core::Dataset {
        images: gradnet_core::Tensor::new(vec![4, 1, 6, 6], pixels).unwrap(),
        labels: vec![0, 1, 1, 2],
        num_classes: 3,
    };
    let ip = dir.path().join("toy-images-idx3-ubyte");
    let lp = dir.path().join("toy-labels-idx1-ubyte");
    gradnet_core::data::write_idx(&ds, &ip, &lp).unwrap();
    let res = gradnet(&["inspect", "--data", ip.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("examples: 4"), "got: {text}");
    assert!(text.contains("1x6x6"));
    assert!(text.contains("label 1: 2"));
}
