use std::path::Path;
use std::process::{Command, Output};

fn flowlab(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowlab"));
    cmd.args(args).env_remove("FLOWLAB_SEED");
    if let Some(s) = seed_env {
        cmd.env("FLOWLAB_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (dir, workers) in dirs.iter().zip(["1", "1", "8"]) {
        let out = flowlab(
            &["simulate", "--scenario", "translation(2)", "--seed", "42", "--paths", "8", "--dt", "0.01", "--workers", workers, "--format", "both", "--out", dir.to_str().unwrap()],
            None,
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["simulate.json", "simulate.csv"] {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f));
        assert_eq!(read(&dirs[0], f), read(&dirs[2], f));
    }
    let csv = String::from_utf8(read(&dirs[0], "simulate.csv")).unwrap();
    assert!(csv.starts_with("path_id,step,time,x1,x2,v1,v2,exploded\r\n"));
    assert_eq!(csv.lines().count(), 1 + 8 * 101);
    let report: serde_json::Value = serde_json::from_slice(&read(&dirs[0], "simulate.json")).unwrap();
    assert_eq!(report["seed"], 42);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["config"]["scenario"], "translation(2)");
}

#[test]
fn seed_comes_from_the_environment() {
    let args = ["exponent", "--scenario", "kunita", "--paths", "20", "--dt", "0.01", "--t", "0.5"];
    let env = flowlab(&args, Some("7"));
    assert!(env.status.success());
    let v: serde_json::Value = serde_json::from_slice(&env.stdout).unwrap();
    assert_eq!(v["seed"], 7);
    let mut with_flag = args.to_vec();
    with_flag.extend(["--seed", "7"]);
    assert_eq!(flowlab(&with_flag, None).stdout, env.stdout);
    assert_ne!(flowlab(&args, Some("8")).stdout, env.stdout);
}

#[test]
fn config_file_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "scenario = \"ou(1)\"\npaths = 30\ndt = 0.01\nseed = 3\n").unwrap();
    let out = flowlab(&["derivative-moments", "--config", cfg.to_str().unwrap(), "--paths", "12"], None);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["paths"], 12);
    assert_eq!(v["config"]["seed"], 3);
    assert_eq!(v["result"]["running_sup"]["sup"]["n"], 12);
}

#[test]
fn validation_errors_exit_two_with_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "paths = 10\ndt = 0.01\nunknown_key = 1\n").unwrap();
    let out = flowlab(&["certify", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");

    let out = flowlab(&["exponent", "--dt", "-1"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = flowlab(&["exponent", "--scenario", "klein_bottle"], None);
    assert_eq!(out.status.code(), Some(2));
    let out = flowlab(&["no-such-command"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn certify_reports_ou_as_certified() {
    let out = flowlab(&["certify", "--scenario", "ou(1)"], None);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let entries = v["result"]["verdicts"]["entries"].as_array().unwrap();
    let cor = entries.iter().find(|e| e["theorem"] == "Cor5.2").unwrap();
    assert_eq!(cor["status"], "certified");
}

#[test]
fn csv_output_is_rfc4180() {
    let out = flowlab(&["exponent", "--scenario", "ou(1)", "--paths", "10", "--dt", "0.01", "--format", "csv"], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("t,estimate,se,n\r\n"));
    assert_eq!(text.matches("\r\n").count(), 5);
}

#[test]
fn scenarios_are_listed() {
    let out = flowlab(&["scenarios"], None);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["inversion_plane", "kunita", "sphere(3)", "paraboloid"] {
        assert!(text.contains(name), "{name}");
    }
}
