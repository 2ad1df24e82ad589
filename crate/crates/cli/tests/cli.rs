use std::path::Path;
use std::process::{Command, Output};

use driftwm_core::denoiser::DenoiserParams;
use driftwm_core::io::{load_checkpoint, read_report, RunConfig};
use driftwm_core::tensor::RngState;

const SMALL: &str = r#"
[data]
train_clips = 6
eval_clips = 3

[base]
steps = 30

[srr]
steps = 12
refresh_period = 6

[trd]
steps = 3

[closed_loop]
depth = 3
scenes = 2
"#;

fn driftwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftwm")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

/// Runs `args` with the shared config and output directory, expecting success.
fn stage(config: &str, out: &Path, args: &[&str]) -> String {
    let mut full = args.to_vec();
    full.extend(["--config", config, "--out", out.to_str().unwrap()]);
    let o = driftwm(&full);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let o = driftwm(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_flag_exits_1() {
    let o = driftwm(&["gen-data", "--frames", "3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_exits_0() {
    let o = driftwm(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("closed-loop"));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\ntrain_clipz = 3\n");
    let o = driftwm(&["gen-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("train_clipz"));
}

#[test]
fn invalid_config_value_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\ntrain_clips = 0\n");
    let o = driftwm(&["gen-data", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn missing_config_file_exits_1() {
    let o = driftwm(&["gen-data", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn training_without_data_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = driftwm(&["train-base", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn ground_truth_eval_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    stage(&cfg, dir.path(), &["gen-data"]);
    stage(&cfg, dir.path(), &["eval", "--model", "gt"]);
    let text = std::fs::read_to_string(dir.path().join("eval_gt.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("chunk,lfd_cumulative,are_deg,dtw"));
    let mut rows = 0;
    for line in lines {
        assert!(line.split(',').skip(1).all(|v| v == "0"), "row {line}");
        rows += 1;
    }
    assert_eq!(rows, RunConfig::default().eval.depth);
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    stage(&cfg, dir.path(), &["gen-data", "--seed", "9"]);
    stage(&cfg, dir.path(), &["train-base", "--seed", "9", "--steps", "0"]);
    let config = RunConfig::default();
    let saved = load_checkpoint(&dir.path().join("base.hdwm"), &config.denoiser, false).unwrap();
    // initialization draws from stream 2 of the run seed
    let init = DenoiserParams::init(&config.denoiser, &mut RngState::new(9).fork(2)).unwrap();
    assert_eq!(saved, init);
}

#[test]
fn mismatched_checkpoint_needs_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    stage(&cfg, dir.path(), &["gen-data"]);
    stage(&cfg, dir.path(), &["train-base", "--steps", "0"]);
    // the action embedding period changes the digest but no parameter shape
    let other = write_config(dir.path(), &format!("{SMALL}\n[denoiser]\naction_max_period = 50.0\n"));
    let out = dir.path().to_str().unwrap();
    let o = driftwm(&["eval", "--model", "base", "--config", &other, "--out", out]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = driftwm(&["eval", "--model", "base", "--config", &other, "--out", out, "--allow-config-mismatch"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn staged_runs_are_bit_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = write_config(d.path(), SMALL);
        stage(&cfg, d.path(), &["gen-data", "--seed", "4"]);
        stage(&cfg, d.path(), &["train-base", "--seed", "4"]);
        stage(&cfg, d.path(), &["train-srr", "--seed", "4"]);
        stage(&cfg, d.path(), &["distill", "--seed", "4"]);
        for model in ["base", "student"] {
            stage(&cfg, d.path(), &["eval", "--seed", "4", "--model", model]);
        }
        stage(&cfg, d.path(), &["rollout", "--seed", "4", "--model", "srr"]);
        stage(&cfg, d.path(), &["closed-loop", "--seed", "4", "--model", "student"]);
        let summary = stage(&cfg, d.path(), &["report"]);
        assert!(summary.contains("base") && summary.contains("student"), "{summary}");
    }
    for name in ["train.hdds", "eval.hdds", "base.hdwm", "srr.hdwm", "student.hdwm", "eval_base.csv", "eval_student.csv", "rollout_srr.hdds", "closed_loop_student.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    let r = read_report(&dirs[0].path().join("eval_student.csv")).unwrap();
    assert_eq!(r.rows.len(), RunConfig::default().eval.depth);
}

#[test]
fn seed_override_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    stage(&cfg, &a, &["gen-data", "--seed", "1"]);
    stage(&cfg, &b, &["gen-data", "--seed", "2"]);
    assert_ne!(std::fs::read(a.join("train.hdds")).unwrap(), std::fs::read(b.join("train.hdds")).unwrap());
}
