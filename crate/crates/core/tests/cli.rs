use std::path::Path;
use std::process::Command;

use fedgraph::experiment::{RunReport, SweepTable};

const SMALL_MOONS: &str = r#"{
  "name": "small",
  "dataset": { "kind": "moons", "n": 200, "noise_sigma": 0.06 },
  "federation": { "num_clients": 2, "clusters": 2, "epsilon": 1.0 }
}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedgraph"));
    cmd.env("FEDGRAPH_THREADS", "1");
    cmd
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_a_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_MOONS);
    let out = dir.path().join("out");
    let status = bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report_path = out.join("small_seed7.json");
    let report = RunReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.seed, 7);
    assert_eq!(report.spec.federation.seed, 7);
    let again = fedgraph::experiment::run_experiment(&report.spec).unwrap();
    assert_eq!(again.acc, report.acc);
    assert_eq!(again.labels, report.labels);
}

#[test]
fn invalid_config_exits_nonzero_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"dataset": {"kind": "moons", "n": 201, "noise_sigma": 0.1}}"#);
    let out = dir.path().join("out");
    let status = bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("config error"));
    assert!(!out.exists());
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_MOONS);
    let out = dir.path().join("sweep");
    let status = bin()
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--repeats", "2", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success());
    let table: SweepTable = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].reports.len(), 2);
    assert!(out.join("table.txt").exists());
    assert_eq!(std::fs::read_to_string(out.join("table.csv")).unwrap().lines().count(), 2);
}

#[test]
fn failed_runs_are_flushed_and_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"[{SMALL_MOONS}, {{"name": "gone", "dataset": {{"kind": "csv", "path": "missing.csv"}}}}]"#
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("sweep");
    let status = bin()
        .args(["sweep", "--config", cfg.to_str().unwrap(), "--repeats", "1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let table: SweepTable = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(table.rows[0].reports.len(), 1);
    assert_eq!(table.rows[1].failures.len(), 1);
}

#[test]
fn ablate_and_het_sweep_expand_their_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_MOONS);
    let out = dir.path().join("ablate");
    let status = bin()
        .args(["ablate", "--config", cfg.to_str().unwrap(), "--repeats", "1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(status.status.success());
    let text = String::from_utf8_lossy(&status.stdout);
    for arm in ["small/full", "small/dp_off", "small/psg_off", "small/gsg_off", "small/psg_off+gsg_off"] {
        assert!(text.contains(arm), "{arm} missing from\n{text}");
    }
    let status = bin()
        .args(["het-sweep", "--config", cfg.to_str().unwrap(), "--ratios", "0.2,0.8", "--repeats", "1"])
        .output()
        .unwrap();
    assert!(status.status.success());
    let text = String::from_utf8_lossy(&status.stdout);
    assert!(text.contains("small/h=0.20") && text.contains("small/h=0.80"));
}

#[test]
fn bench_reports_bounded_messages() {
    let status = bin().args(["bench", "--sizes", "100,200"]).output().unwrap();
    assert!(status.status.success());
    let text = String::from_utf8_lossy(&status.stdout);
    assert_eq!(text.lines().count(), 3, "{text}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let spec = fedgraph::experiment::ExperimentSpec::from_file(&path).unwrap();
        if let fedgraph::experiment::DatasetSource::Csv { path, .. } = &spec.dataset {
            assert!(path.exists(), "{}", path.display());
        }
    }
}
