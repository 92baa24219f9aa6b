//! End-to-end runs of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinnoise")).args(args).output().expect("spawn spinnoise")
}

#[test]
fn susceptibility_writes_tables_config_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["susceptibility", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["susceptibility.csv", "susceptibility.json", "config.toml", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("susceptibility.csv")).unwrap();
    assert!(csv.lines().count() > 2);
    // The saved configuration reproduces the run.
    let again = dir.path().join("again");
    let o = run(&["susceptibility", "--config", out.join("config.toml").to_str().unwrap(), "--output", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("susceptibility.csv")).unwrap(), std::fs::read(again.join("susceptibility.csv")).unwrap());
}

#[test]
fn bad_config_lists_every_problem_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[probe]\ntemperature = 300\n[material]\ngilbert_damping = -1\n[nonsense]\n").unwrap();
    let o = run(&["susceptibility", "--config", cfg.to_str().unwrap(), "--output", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("temperature") && err.contains("nonsense") && err.contains("damping"), "{err}");
}

#[test]
fn missing_config_file_exits_2() {
    let o = run(&["dephasing", "--config", "/nonexistent/spinnoise.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dephasing_reports_t2_for_both_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let cfg = dir.path().join("d.toml");
    std::fs::write(&cfg, "[dephasing]\ninclude_em = false\n").unwrap();
    let o = run(&["dephasing", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("dephasing.json")).unwrap()).unwrap();
    let models = json.as_array().expect("one entry per model");
    let t2: Vec<f64> = models.iter().map(|m| m["t2_seconds"].as_f64().unwrap()).collect();
    assert_eq!(t2.len(), 2);
    assert!((t2[0] * 1e6 - 8.2223).abs() < 1e-3, "{t2:?}");
    assert!(t2[1] < t2[0]);
    assert!(Path::new(&out.join("dephasing.csv")).is_file());
}
