use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use aod_cli::{run_with_env, BEST_CHILD_DIR, CHECKPOINT_DIR, CONFIG_ECHO, CONTROLLER_FILE, FINAL_FILE};
use aod_core::config::RunConfig;
use aod_core::search::{Phase, SearchLog, StepRecord, LOG_FILE, SUMMARY_FILE, TIMING_FILE, TOP5_FILE};
use tempfile::TempDir;

const TINY: &str = r#"{
  "dataset": {
    "kind": "planted",
    "inliers": "blobs",
    "outliers": ["textures", "gaussian"],
    "n": 80,
    "n_out": 30,
    "shape": [1, 8, 8],
    "plan": { "contamination": 0.2 }
  },
  "search": {
    "layers": 1, "epochs": 2, "children_per_step": 2, "candidates": 2, "top_k": 1,
    "child_steps": 3, "max_child_macs": 2000000
  },
  "zoo": { "batch_size": 8 },
  "controller": { "hidden": 12, "embed": 12 }
}"#;

fn args(list: &[&str]) -> Vec<OsString> {
    std::iter::once("aod").chain(list.iter().copied()).map(OsString::from).collect()
}

fn cli(list: &[&str]) -> (i32, String) {
    cli_env(list, None)
}

fn cli_env(list: &[&str], env_out: Option<PathBuf>) -> (i32, String) {
    let mut out = Vec::new();
    let code = run_with_env(&args(list), env_out, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_twice_gives_identical_logs_and_all_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let (code, stdout) = cli(&["search", "--config", &cfg, "--seed", "7", "--out", path(out)]);
        assert_eq!(code, 0, "{stdout}");
        assert!(stdout.contains("rank"));
    }
    let log_a = fs::read(a.join(LOG_FILE)).unwrap();
    assert_eq!(log_a, fs::read(b.join(LOG_FILE)).unwrap());
    for f in [TIMING_FILE, SUMMARY_FILE, TOP5_FILE, CONFIG_ECHO, FINAL_FILE] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let ckpt = a.join(CHECKPOINT_DIR);
    assert!(ckpt.join(CONTROLLER_FILE).is_file());
    assert!(ckpt.join(BEST_CHILD_DIR).join("spec.json").is_file());

    let echo = RunConfig::load(&a.join(CONFIG_ECHO)).unwrap();
    assert_eq!(echo.seed, 7);
    assert_eq!(echo.output_dir, a);
    assert_eq!(echo.search.children_per_step, 2);
    let log = SearchLog::read(&a).unwrap();
    assert_eq!(log.len(), 2 * (2 + 1));
}

#[test]
fn random_search_writes_artifacts_without_a_controller() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("r");
    let (code, _) = cli(&["random-search", "--config", &cfg, "--out", path(&out), "--budget", "2"]);
    assert_eq!(code, 0);
    assert!(out.join(LOG_FILE).is_file());
    assert!(!out.join(CHECKPOINT_DIR).join(CONTROLLER_FILE).exists());
    let log = SearchLog::read(&out).unwrap();
    assert!(log.records.iter().all(|r| r.failure.is_some() || r.train_steps == 2));
    assert_eq!(RunConfig::load(&out.join(CONFIG_ECHO)).unwrap().search.child_steps, 2);
}

#[test]
fn nothing_is_written_outside_the_output_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("only");
    assert_eq!(cli(&["search", "--config", &cfg, "--out", path(&out)]).0, 0);
    let mut names: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec!["c.json", "only"]);
}

#[test]
fn env_var_sets_the_output_directory_and_the_flag_wins() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let env_dir = tmp.path().join("env");
    assert_eq!(cli_env(&["random-search", "--config", &cfg], Some(env_dir.clone())).0, 0);
    assert!(env_dir.join(LOG_FILE).is_file());

    let flag_dir = tmp.path().join("flag");
    let other = tmp.path().join("ignored");
    assert_eq!(cli_env(&["random-search", "--config", &cfg, "--out", path(&flag_dir)], Some(other.clone())).0, 0);
    assert!(flag_dir.join(LOG_FILE).is_file());
    assert!(!other.exists());
}

fn record(step: usize, epoch: usize, reward: f64) -> StepRecord {
    StepRecord {
        step,
        epoch,
        phase: Phase::Search,
        actions: vec![step % 4, 0, 0, 0, 0, 0, 0, 0],
        spec: String::new(),
        raw_reward: reward,
        kl_bonus: 0.0,
        shaped_reward: reward,
        baseline: 0.0,
        buffer_event: None,
        train_loss: None,
        train_steps: 1,
        failure: None,
        test_reward: None,
    }
}

#[test]
fn report_on_forty_epochs_gives_two_rows_and_a_top_table() {
    let tmp = TempDir::new().unwrap();
    let mut log = SearchLog::default();
    for e in 0..40 {
        for j in 0..2 {
            log.push(record(2 * e + j, e, (e * 2 + j) as f64 / 100.0), 0.0).unwrap();
        }
    }
    let run_dir = tmp.path().join("run");
    log.write_all(&run_dir).unwrap();
    let out = tmp.path().join("rep");
    let (code, stdout) = cli(&["report", "--log", path(&run_dir), "--out", path(&out)]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(out.join(SUMMARY_FILE)).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], "epoch,best,mean,std");
    assert!(rows[1].starts_with("20,0.39,"));
    assert!(rows[2].starts_with("40,0.79,"));
    let top: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(TOP5_FILE)).unwrap()).unwrap();
    assert_eq!(top.as_array().unwrap().len(), 4);
    assert!(stdout.contains("epoch,best,mean,std"));
}

#[test]
fn report_without_out_only_prints() {
    let tmp = TempDir::new().unwrap();
    let mut log = SearchLog::default();
    log.push(record(0, 0, 0.5), 0.0).unwrap();
    log.write_all(tmp.path()).unwrap();
    fs::remove_file(tmp.path().join(SUMMARY_FILE)).unwrap();
    let (code, stdout) = cli(&["report", "--log", path(tmp.path())]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("epoch,best,mean,std\n1,0.5,0.5,0\n"));
    assert!(!tmp.path().join(SUMMARY_FILE).exists());
}

#[test]
fn train_one_builds_the_mnist_architecture_and_evaluate_reloads_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &TINY.replace("\"shape\": [1, 8, 8]", "\"shape\": [1, 16, 16]"),
    );
    let spec = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist_spec.json");
    let out = tmp.path().join("one");
    let (code, stdout) = cli(&["train-one", "--spec", path(&spec), "--config", &cfg, "--out", path(&out), "--budget", "2"]);
    assert_eq!(code, 0, "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(FINAL_FILE)).unwrap()).unwrap();
    let auroc = report["test"]["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));

    let child = out.join(CHECKPOINT_DIR).join("child");
    let (code, printed) = cli(&["evaluate", "--checkpoint", path(&child), "--split", "test"]);
    assert_eq!(code, 0);
    let scores: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(scores["auroc"].as_f64().unwrap(), auroc);
    assert!(!out.join("evaluation_test.json").exists());

    let (code, _) = cli(&["evaluate", "--checkpoint", path(&child), "--split", "valid", "--out", path(&out)]);
    assert_eq!(code, 0);
    assert!(out.join("evaluation_valid.json").is_file());
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(cli(&["search", "--frobnicate"]).0, 2);
    assert_eq!(cli(&["launch"]).0, 2);
    assert_eq!(cli(&["search", "--seed", "x"]).0, 2);
    let missing = tmp.path().join("nope.json");
    assert_eq!(cli(&["search", "--config", path(&missing)]).0, 2);
    let typo = write_config(tmp.path(), r#"{"serch": {}}"#);
    assert_eq!(cli(&["search", "--config", &typo]).0, 2);
    let negative = write_config(tmp.path(), r#"{"search": {"eta_explore": -1}}"#);
    assert_eq!(cli(&["search", "--config", &negative]).0, 2);
    let zero = write_config(tmp.path(), r#"{"search": {"children_per_step": 0}}"#);
    assert_eq!(cli(&["search", "--config", &zero]).0, 2);
    let bad_spec = tmp.path().join("s.json");
    fs::write(&bad_spec, r#"{"hypothesis": "density", "distance": "l1", "layers": []}"#).unwrap();
    assert_eq!(cli(&["train-one", "--spec", path(&bad_spec), "--out", path(&tmp.path().join("o"))]).0, 2);
    assert_eq!(cli(&["evaluate", "--checkpoint", path(&tmp.path().join("none"))]).0, 2);
    assert_eq!(cli(&["--help"]).0, 0);
}

#[test]
fn runtime_failures_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!(r#"{{"dataset": {{"kind": "stored", "dir": "{}"}}}}"#, path(&tmp.path().join("absent"))),
    );
    let (code, _) = cli(&["search", "--config", &cfg, "--out", path(&tmp.path().join("o"))]);
    assert_eq!(code, 3);
}
