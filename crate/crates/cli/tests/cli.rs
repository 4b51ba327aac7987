use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json")
}

fn ckstn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckstn"))
        .current_dir(dir)
        .env_remove("CKSTN_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn result(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("RESULT "))
        .unwrap_or_else(|| panic!("no RESULT line in {stdout:?}; stderr {}", String::from_utf8_lossy(&out.stderr)));
    serde_json::from_str(line).unwrap()
}

fn toy(dir: &Path, output: &str, extra: &[&str], command: &str) -> Output {
    let cfg = toy_config();
    let set_output = format!("output={output}");
    let mut args = vec!["--config", cfg.to_str().unwrap(), "--set", &set_output];
    for e in extra {
        args.push("--set");
        args.push(e);
    }
    args.push(command);
    ckstn(dir, &args)
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = ckstn(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ckstn(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(ckstn(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(ckstn(dir.path(), &["no-such-command"]).status.code(), Some(1));
}

#[test]
fn grad_check_on_toy_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = toy(dir.path(), "gc", &[], "grad-check");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = result(&out);
    assert_eq!(r["pass"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(r["checked"].as_u64().unwrap() > 0);
    assert!(dir.path().join("gc/grad_check_seed1.json").exists());
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = toy(d, "data", &[], "gen-data");
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(result(&out)["train_pairs"], 200);

    let short = ["data.corpus=data/corpus.json", "train.epochs=2", "train.warmup=1"];
    let trained = toy(d, "run", &short, "train");
    assert_eq!(trained.status.code(), Some(0), "{}", String::from_utf8_lossy(&trained.stderr));
    let train_report = result(&trained)["report"].clone();
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);

    let evaluated = toy(d, "run", &short, "eval");
    assert_eq!(evaluated.status.code(), Some(0));
    let eval_report = result(&evaluated);
    for key in ["image_r1", "sentence_r1", "rsum", "n"] {
        assert_eq!(eval_report[key], train_report[key], "{key}");
    }
    let csv = fs::read_to_string(d.join("run/eval_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    // one manifest per invocation, never overwritten
    assert!(d.join("run/run_manifest.json").exists());
    let second: Value = serde_json::from_str(&fs::read_to_string(d.join("run/run_manifest.1.json")).unwrap()).unwrap();
    assert_eq!(second["command"], "eval");
    assert_eq!(second["exit_code"], 0);
    assert_eq!(second["seed"], 7);

    let matched = toy(d, "run", &short, "export-matching");
    assert_eq!(matched.status.code(), Some(0));
    let lines = fs::read_to_string(d.join("run/matching.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);
}

#[test]
fn seed_comes_from_environment_unless_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let run = |extra: &[&str]| {
        let mut args = vec!["--config", cfg.to_str().unwrap(), "--set", "output=p"];
        args.extend_from_slice(extra);
        args.push("param-count");
        let out = Command::new(env!("CARGO_BIN_EXE_ckstn"))
            .current_dir(dir.path())
            .env("CKSTN_SEED", "42")
            .args(&args)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
    };
    run(&[]);
    run(&["--set", "seed=3"]);
    let seed = |name: &str| -> Value {
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("p").join(name)).unwrap()).unwrap();
        m["seed"].clone()
    };
    assert_eq!(seed("run_manifest.json"), 42);
    assert_eq!(seed("run_manifest.1.json"), 3);
}

#[test]
fn param_count_reports_lightweight_ffn() {
    let dir = tempfile::tempdir().unwrap();
    let out = toy(dir.path(), "p", &[], "param-count");
    let r = result(&out);
    assert_eq!(r["total"], 15752);
    assert!(r["ffn_per_layer"].as_u64().unwrap() < r["standard_ffn_per_layer"].as_u64().unwrap());
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(toy(d, "x", &["train.epoch=3"], "train").status.code(), Some(1));
    assert_eq!(toy(d, "x", &["train.warmup=30"], "train").status.code(), Some(1));
    assert_eq!(ckstn(d, &["--config", "missing.json", "train"]).status.code(), Some(3));
    assert_eq!(toy(d, "x", &["data.corpus=none/corpus.json"], "train").status.code(), Some(3));
    assert_eq!(toy(d, "empty", &[], "eval").status.code(), Some(3));

    fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(ckstn(d, &["--config", "bad.json", "train"]).status.code(), Some(1));

    let out = toy(d, "huge", &["data.synth.noise=1e300"], "train");
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("huge/nan_dump.json").exists());
}
