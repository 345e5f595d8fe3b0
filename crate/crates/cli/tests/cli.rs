use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fairdd(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairdd"));
    cmd.args(args).env_remove("FDD_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = ["--classes", "3", "--groups", "2", "--res", "8", "--per-class", "20", "--br", "0.9"];

fn gen(out: &Path, extra: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut args = vec!["gen-data"];
    args.extend(SMALL);
    args.extend(extra);
    args.extend(["--out", p(out)]);
    fairdd(&args, envs)
}

const TINY_MATRIX: &str = r#"{
  "dataset": {"num_classes": 2, "num_groups": 2, "mode": "fg", "resolution": [8, 8], "per_class_count": 12},
  "grid": {"weighting": ["vanilla", "fairdd"], "matcher": ["dm"], "ipc": [1], "br": [0.9], "init": ["noise"], "seeds": [0]},
  "distill": {"iterations": 2, "lr_pixels": 1.0, "group_batch": 8},
  "eval": {"epochs": 2, "lr": 0.05, "batch": 8, "seeds": [0]}
}"#;

#[test]
fn help_and_usage_errors() {
    let o = fairdd(&["--help"], &[]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("gen-data"));

    let o = fairdd(&["verify", "--bogus"], &[]);
    assert_eq!(code(&o), 1);
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));

    assert_eq!(code(&fairdd(&[], &[])), 1);
    assert_eq!(code(&fairdd(&["gen-data", "--mode", "sepia", "--out", "x.fdds"], &[])), 1);
}

#[test]
fn gen_distill_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.fdds");
    let test = dir.path().join("test.fdds");
    let syn = dir.path().join("syn.fdds");
    let report = dir.path().join("report.json");
    assert_eq!(code(&gen(&train, &[], &[])), 0);
    assert_eq!(code(&gen(&test, &["--test"], &[])), 0);
    assert!(dir.path().join("train.manifest.json").exists());

    let o = fairdd(
        &["distill", "--data", p(&train), "--ipc", "2", "--iterations", "3", "--lr-pixels", "1", "--group-batch", "8", "--out", p(&syn)],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("syn.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["iterations"], 3);
    assert_eq!(manifest["trace"].as_array().unwrap().len(), 3);
    let trace = fs::read_to_string(dir.path().join("syn.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    let o = fairdd(
        &["eval", "--train", p(&syn), "--test", p(&test), "--epochs", "2", "--batch", "8", "--seeds", "0,1", "--out", p(&report)],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["deo_m", "deo_a", "accuracy"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v), "{key} = {v}");
    }
    assert_eq!(r["per_seed"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn distill_config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.fdds");
    assert_eq!(code(&gen(&train, &[], &[])), 0);
    let cfg = dir.path().join("d.json");
    fs::write(
        &cfg,
        r#"{"ipc": 1, "iterations": 5, "lr_pixels": 2.0, "seed": 4, "init": "noise",
            "match": {"matcher": "gm", "distance": "cosine", "weighting": "inverse"}, "group_batch": 8}"#,
    )
    .unwrap();
    let syn = dir.path().join("syn.fdds");
    let o = fairdd(&["distill", "--data", p(&train), "--config", p(&cfg), "--iterations", "1", "--out", p(&syn)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("syn.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["iterations"], 1);
    assert_eq!(m["config"]["seed"], 4);
    assert_eq!(m["config"]["match"]["weighting"], "inverse_ratio");
    assert_eq!(m["config"]["arch"], "convnet");

    fs::write(&cfg, r#"{"ipc": "one", "lr_pixels": 1.0}"#).unwrap();
    let o = fairdd(&["distill", "--data", p(&train), "--config", p(&cfg), "--out", p(&syn)], &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/ipc"), "{}", stderr(&o));
}

#[test]
fn missing_and_damaged_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.fdds");
    let out = dir.path().join("o.fdds");
    let o = fairdd(&["distill", "--data", p(&missing), "--out", p(&out)], &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no such file"), "{}", stderr(&o));

    let junk = dir.path().join("junk.fdds");
    fs::write(&junk, b"definitely not a dataset").unwrap();
    let o = fairdd(&["distill", "--data", p(&junk), "--iterations", "1", "--out", p(&out)], &[]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.starts_with("error: distill:"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.fdds");
    let b = dir.path().join("b.fdds");
    let c = dir.path().join("c.fdds");
    let d = dir.path().join("d.fdds");
    assert_eq!(code(&gen(&a, &[], &[("FDD_SEED", "7")])), 0);
    assert_eq!(code(&gen(&b, &["--seed", "7"], &[])), 0);
    assert_eq!(code(&gen(&c, &["--seed", "3"], &[("FDD_SEED", "7")])), 0);
    assert_eq!(code(&gen(&d, &["--seed", "3"], &[])), 0);
    let read = |x: &Path| fs::read(x).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&c), read(&d));
    assert_ne!(read(&a), read(&c));
    assert_eq!(code(&gen(&a, &[], &[("FDD_SEED", "seven")])), 1);
}

#[test]
fn verify_writes_passing_mse_claims() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.json");
    let o = fairdd(&["verify", "--instances", "25", "--seed", "0", "--out", p(&out)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let claims = v["claims"].as_array().unwrap();
    for name in ["vanilla_mse_fixed_point", "fairdd_mse_fixed_point", "jensen_bound_mse"] {
        let c = claims.iter().find(|c| c["claim"] == name).unwrap();
        assert_eq!(c["status"], "pass", "{name}");
    }
}

#[test]
fn matrix_validation_points_at_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.json");
    let mut v: Value = serde_json::from_str(TINY_MATRIX).unwrap();
    v["grid"]["weighting"] = serde_json::json!([]);
    fs::write(&cfg, v.to_string()).unwrap();
    let o = fairdd(&["matrix", "--config", p(&cfg), "--check"], &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/grid/weighting"), "{}", stderr(&o));

    let mut v: Value = serde_json::from_str(TINY_MATRIX).unwrap();
    v["grid"]["br"] = serde_json::json!([0.5]);
    fs::write(&cfg, v.to_string()).unwrap();
    let o = fairdd(&["matrix", "--config", p(&cfg), "--check"], &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/grid/br/0"), "{}", stderr(&o));

    fs::write(&cfg, TINY_MATRIX).unwrap();
    let o = fairdd(&["matrix", "--config", p(&cfg), "--check"], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echoed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(echoed["distill"]["arch"], "convnet");
    assert_eq!(echoed["dataset"]["label_noise"], 0.0);
}

#[test]
fn matrix_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.json");
    fs::write(&cfg, TINY_MATRIX).unwrap();
    let run_dir = dir.path().join("run");
    let o = fairdd(&["matrix", "--config", p(&cfg), "--jobs", "2", "--out", p(&run_dir)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let results = fs::read_to_string(run_dir.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert!(results.lines().nth(1).unwrap().contains(",vanilla,"));
    assert!(results.lines().nth(2).unwrap().contains(",fairdd,"));

    let again = dir.path().join("again");
    let o = fairdd(&["matrix", "--config", p(&cfg), "--jobs", "1", "--out", p(&again)], &[]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(again.join("results.csv")).unwrap(), results);
    let stem = "cell001_dm_fairdd_ipc1_br0.9_noise_s0.fdds";
    assert_eq!(fs::read(run_dir.join(stem)).unwrap(), fs::read(again.join(stem)).unwrap());

    let out = dir.path().join("cmp");
    let o = fairdd(&["report", "--results", p(&run_dir), "--out", p(&out)], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("deltas against vanilla"));
    let deltas = fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 2);

    let o = fairdd(&["report", "--results", p(&dir.path().join("none.csv"))], &[]);
    assert_eq!(code(&o), 1);
}
