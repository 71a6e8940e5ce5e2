use std::path::{Path, PathBuf};
use std::process::Command;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn vipsim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vipsim"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn run_writes_one_row_per_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let status = vipsim()
        .args(["run", "--config"])
        .arg(root().join("configs/geant.toml"))
        .args(["--algorithm", "sp_lce_lru", "--lambda", "1,2", "--slots", "20", "--runs", "2", "--seed", "3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("algorithm,topology,lambda,W,z,seed,slots,total_delay"));
    assert!(lines[1].starts_with("sp_lce_lru,geant,1,"));
    assert!(lines[4].starts_with("sp_lce_lru,geant,2,"));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.csv");
    let status = vipsim()
        .args(["run", "--config"])
        .arg(root().join("configs/geant_tradeoff.toml"))
        .args(["--lambda", "3", "--W", "1,10", "--z", "2", "--slots", "20", "--runs", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][2], rows[0][3], rows[0][4]), ("3", "1", "2"));
    assert_eq!(rows[1][3], "10");
}

#[test]
fn validate_reports_shape() {
    let out = vipsim().args(["validate", "--topology"]).arg(root().join("fixtures/dtelekom.topo")).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("68 nodes"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let topo = dir.path().join("bad.topo");
    std::fs::write(&topo, "nodes 2\nedge 0 1 -5\n").unwrap();
    let out = vipsim().args(["validate", "--topology"]).arg(&topo).output().unwrap();
    assert!(!out.status.success());

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[experiment]\nslotz = 5\n").unwrap();
    let out = vipsim().args(["run", "--config"]).arg(&cfg).args(["--out"]).arg(dir.path().join("x.csv")).output().unwrap();
    assert!(!out.status.success());
    assert!(!dir.path().join("x.csv").exists());
}
