//! Drives the `decaf` binary through its subcommands on a small config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decaf_core::representation::EncoderKind;
use decaf_harness::report::{parse_results, RESULTS_HEADER};
use decaf_harness::{Baseline, ExperimentConfig, PresetName, Task};

fn small(task: Task, encoder: EncoderKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_preset(PresetName::PongLike, task);
    cfg.encoder = encoder;
    cfg.seeds = vec![0];
    cfg.source_samples = 3_000;
    cfg.source_rate_window = 800;
    cfg.target_samples = Some(vec![200, 400]);
    cfg.adaptation_steps = Some(30);
    cfg.classifier.epochs = 5;
    cfg.linear.train.epochs = 5;
    cfg.fine_tune.epochs = 5;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn decaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decaf"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("running decaf")
}

fn ok(args: &[&str]) -> (String, String) {
    let out = decaf(args);
    let (stdout, stderr) = (String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned());
    assert!(out.status.success(), "decaf {args:?} failed:\n{stderr}");
    (stdout, stderr)
}

#[test]
fn stages_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Task::Adapt, EncoderKind::LearnedLinear);
    let config = write_config(tmp.path(), &cfg);
    let bundle = tmp.path().join("run");
    let (c, o) = (config.to_str().unwrap(), bundle.to_str().unwrap());

    let (stdout, _) = ok(&["generate", "--config", c, "--out", o]);
    assert!(stdout.contains("seed=0 steps=[3000, 400]"), "{stdout}");
    assert!(bundle.join("seed-0/source.traj").exists());

    let (_, log) = ok(&["train-source", "--out", o]);
    assert!(log.contains("stage=train-source"), "{log}");

    let (detect, _) = ok(&["detect", "--out", o]);
    let mut lines = detect.lines();
    assert_eq!(lines.next(), Some("seed,source,budget,variable,max_delta,detected"));
    assert_eq!(lines.count(), 2 * 4);

    ok(&["adapt", "--out", o]);
    let results = std::fs::read_to_string(bundle.join("results.csv")).unwrap();
    assert!(results.starts_with(RESULTS_HEADER));
    let rows = parse_results(&results).unwrap();
    // 4 baselines × 2 budgets × 2 scopes × 2 metrics.
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.cc)));

    let (summary, _) = ok(&["report", "--out", o]);
    assert!(summary.starts_with("baseline,metric,scope,budget,seeds,"));
    assert!(summary.lines().any(|l| l.starts_with("ft,spearman,changed,400,1,")));
    let plot = std::fs::read_to_string(bundle.join("plot.csv")).unwrap();
    assert!(plot.starts_with("metric,scope,baseline,budget,cc_mean,cc_std\n"));
    assert!(plot.contains("spearman,changed,decaf,200,"));

    let events = std::fs::read_to_string(bundle.join("seed-0/events.log")).unwrap();
    for stage in ["generate", "train-source", "detect", "adapt", "evaluate"] {
        assert!(events.contains(&format!("stage={stage} elapsed_ms=")), "missing {stage}");
    }
}

#[test]
fn single_seed_runs_accumulate_and_rerun_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Task::Adapt, EncoderKind::Oracle);
    cfg.baselines = vec![Baseline::ZeroShot, Baseline::FineTune, Baseline::Decaf];
    let config = write_config(tmp.path(), &cfg);
    let bundle = tmp.path().join("run");
    let (c, o) = (config.to_str().unwrap(), bundle.to_str().unwrap());

    ok(&["evaluate", "--config", c, "--out", o, "--seed", "4"]);
    ok(&["evaluate", "--config", c, "--out", o, "--seed", "9"]);
    let (summary, _) = ok(&["report", "--out", o]);
    assert!(summary.lines().any(|l| l.starts_with("decaf,spearman,all,200,2,")), "{summary}");
    assert!(summary.lines().any(|l| l.starts_with("ft,n/a")), "{summary}");

    let first = std::fs::read(bundle.join("results.csv")).unwrap();
    let again = tmp.path().join("again");
    ok(&["evaluate", "--config", c, "--out", again.to_str().unwrap(), "--seed", "4"]);
    ok(&["evaluate", "--config", c, "--out", again.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(std::fs::read(again.join("results.csv")).unwrap(), first);
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Task::Compose, EncoderKind::Oracle);
    let config = write_config(tmp.path(), &cfg);
    let bundle = tmp.path().join("run");
    let (c, o) = (config.to_str().unwrap(), bundle.to_str().unwrap());

    let (detect, _) = ok(&["detect", "--config", c, "--out", o, "--tau", "0.999", "--target-samples", "150"]);
    // Two sources, one budget, four variables, nothing above the threshold.
    assert_eq!(detect.lines().count(), 1 + 2 * 4);
    assert!(detect.lines().skip(1).all(|l| l.contains(",150,") && l.ends_with(",false")));
    let snapshot: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(bundle.join("config.json")).unwrap()).unwrap();
    assert_eq!((snapshot.tau, snapshot.target_samples), (Some(0.999), Some(vec![150])));

    ok(&["compose", "--out", o]);
    let rows = parse_results(&std::fs::read_to_string(bundle.join("results.csv")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.baseline.as_str()).collect();
    for l in ["0shot-coarse", "0shot-changed", "decaf", "scratch"] {
        assert!(labels.contains(&l), "missing {l} in {labels:?}");
    }
}

#[test]
fn bad_invocations_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Task::Adapt, EncoderKind::Oracle);
    let config = write_config(tmp.path(), &cfg);
    let (c, o) = (config.to_str().unwrap(), tmp.path().join("run"));
    let o = o.to_str().unwrap();

    let cases: Vec<Vec<&str>> = vec![
        vec!["compose", "--config", c, "--out", o],
        vec!["detect", "--config", c, "--out", o, "--tau", "1.5"],
        vec!["report", "--out", o],
        vec!["generate", "--config", "/nonexistent/config.json", "--out", o],
        vec!["generate", "--preset", "no-such-preset", "--out", o],
    ];
    for args in cases {
        let out = decaf(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }

    std::fs::write(tmp.path().join("typo.json"), r#"{"seedz": [1]}"#).unwrap();
    let out = decaf(&["generate", "--config", tmp.path().join("typo.json").to_str().unwrap(), "--out", o]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seedz"));
}

#[test]
fn report_names_missing_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Task::Adapt, EncoderKind::Oracle);
    cfg.seeds = vec![0, 1];
    let config = write_config(tmp.path(), &cfg);
    let bundle = tmp.path().join("run");
    let (c, o) = (config.to_str().unwrap(), bundle.to_str().unwrap());
    ok(&["generate", "--config", c, "--out", o]);
    let out = decaf(&["report", "--out", o]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed-0/results.csv") && err.contains("seed-1/results.csv"), "{err}");
}
