use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn actmon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actmon"))
        .current_dir(dir)
        .env_remove("ACTMON_ENDPOINT")
        .args(args)
        .output()
        .expect("spawn actmon")
}

fn write_config(dir: &Path, config: &Value) {
    std::fs::write(dir.join("run.json"), serde_json::to_vec_pretty(config).unwrap()).unwrap();
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(out: Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    stderr
}

fn linear_config() -> Value {
    json!({
        "seed": 1,
        "synth": {
            "kind": "linear",
            "n_examples": 200,
            "tokens_per_example": 4,
            "spec": { "d_model": 8, "direction": [1, 0, 0, 0, 0, 0, 0, 0], "gap": 4.0, "noise_sigma": 1.0, "seed": 2 }
        },
        "probes": [ {
            "name": "p",
            "pipeline": { "layer": 0, "prompt_mode": "none", "transform": "raw", "pooling": "last_token" }
        } ]
    })
}

fn auroc_column(csv: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "auroc").unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn linear_probe_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &linear_config());
    ok(actmon(dir.path(), &["--config", "run.json", "--out", "r", "synth"]));
    let printed = ok(actmon(
        dir.path(),
        &["--config", "run.json", "--out", "r", "train-probe"],
    ));
    assert!(printed.starts_with("p\t"));

    ok(actmon(dir.path(), &["--config", "run.json", "--out", "r", "report"]));
    let first = std::fs::read_to_string(dir.path().join("r/report.csv")).unwrap();
    let aurocs = auroc_column(&first);
    assert_eq!(aurocs.len(), 1);
    assert!(aurocs[0] > 0.99, "{first}");

    // The run directory alone is enough to rebuild the same report.
    ok(actmon(dir.path(), &["--out", "r", "report"]));
    let second = std::fs::read_to_string(dir.path().join("r/report.csv")).unwrap();
    assert_eq!(first, second);

    let manifest: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r/run_manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    for stage in ["synth", "train-probe", "report"] {
        assert_eq!(manifest["stages"][stage]["config_hash"], hash);
    }
}

#[test]
fn seed_override_changes_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &linear_config());
    let hash = |out: &str, extra: &[&str]| {
        let mut args = vec!["--config", "run.json", "--out", out];
        args.extend_from_slice(extra);
        args.push("synth");
        ok(actmon(dir.path(), &args));
        let m: Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(out).join("run_manifest.json")).unwrap()).unwrap();
        m["config_hash"].as_str().unwrap().to_string()
    };
    let base = hash("a", &[]);
    assert_eq!(base, hash("b", &[]));
    assert_ne!(base, hash("c", &["--seed", "9"]));
}

#[test]
fn stage_before_its_inputs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &linear_config());
    let err = failure(actmon(
        dir.path(),
        &["--config", "run.json", "--out", "r", "train-probe"],
    ));
    assert!(err.starts_with("error["), "{err}");
    assert!(err.contains("synth"), "{err}");
}

#[test]
fn empty_sweep_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = linear_config();
    config["sweeps"] = json!([ {
        "name": "s",
        "sweep": {
            "axis": "train_positives",
            "values": [],
            "method": {
                "name": "p",
                "kind": {
                    "type": "probe",
                    "pipeline": { "layer": 0, "prompt_mode": "none", "transform": "raw", "pooling": "last_token" },
                    "config": serde_json::to_value(actmon_core::probe::ProbeConfig::raw_default()).unwrap()
                }
            }
        }
    } ]);
    write_config(dir.path(), &config);
    let err = failure(actmon(dir.path(), &["--config", "run.json", "--out", "r", "sweep"]));
    assert!(err.starts_with("error[config]"), "{err}");
    assert!(!dir.path().join("r/reports").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = linear_config();
    config["probes"][0]["pooling_mode"] = json!("max_pool");
    write_config(dir.path(), &config);
    let err = failure(actmon(dir.path(), &["--config", "run.json", "--out", "r", "synth"]));
    assert!(err.starts_with("error[config]"), "{err}");
    assert!(err.contains("pooling_mode"), "{err}");
}

#[test]
fn every_violation_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({
        "seed": 0,
        "ingest": { "manifest": "missing.jsonl", "name": "d", "task_concept": "c" },
        "probes": [
            { "name": "p", "pipeline": { "layer": 0, "prompt_mode": "none", "transform": "raw", "pooling": "last_token" }, "n_train_positives": 0 },
            { "name": "p", "pipeline": { "layer": 0, "prompt_mode": "none", "transform": "raw", "pooling": "last_token" } }
        ]
    });
    write_config(dir.path(), &config);
    let err = failure(actmon(dir.path(), &["--config", "run.json", "--out", "r", "ingest"]));
    assert!(err.starts_with("error[config]"), "{err}");
    assert!(err.contains("missing.jsonl"), "{err}");
    assert!(err.contains("n_train_positives"), "{err}");
    assert!(err.contains("duplicate"), "{err}");
}
