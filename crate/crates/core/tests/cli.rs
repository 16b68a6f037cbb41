use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ipslab::cli::pipeline::{RunManifest, Status};
use ipslab::io;

fn ipslab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipslab")).arg("--out").arg(out).args(args).output().unwrap()
}

fn small_config(dir: &Path, potential: &str, learn: bool) -> PathBuf {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "system": {{
    "n": 3, "d": 1, "potential": {potential},
    "dt": 0.02, "t_end": 2.0, "n_paths": 400,
    "initial": {{"kind": "gaussian", "mean": [0.0, 0.0], "coords": "relative"}},
    "seed": 5, "snapshots": {{"every": 5}}
  }},
  "stages": {{"learn": {learn}}},
  "density": {{"grid": {{"bins": 12}}, "times": [0.5, 1.0, 1.5, 2.0]}},
  "space": {{"kind": "hats", "n": 2}},
  "coercivity": {{"horizons": [2.0], "stationary_from": 1.0}},
  "learn": {{"space": {{"kind": "constant"}}}}
}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

const QUADRATIC: &str = r#"{"family": "pure_power", "gamma": 2.0}"#;

#[test]
fn help_exits_zero_and_bad_usage_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ipslab(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(ipslab(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn malformed_json_reports_position_and_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"schema_version\": 1,\n  \"system\": [\n}").unwrap();
    let out = ipslab(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
    assert!(err.contains("column"), "{err}");
}

#[test]
fn unknown_fields_and_versions_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), QUADRATIC, false);
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, text.replacen("\"schema_version\": 1", "\"schema_version\": 9", 1)).unwrap();
    assert_eq!(ipslab(&["run", "--config", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(2));
    std::fs::write(&cfg, text.replacen("\"stages\"", "\"stagez\"", 1)).unwrap();
    assert_eq!(ipslab(&["run", "--config", cfg.to_str().unwrap()], tmp.path()).status.code(), Some(2));
}

#[test]
fn inadmissible_potential_halts_at_the_first_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"{"family": "pure_power", "gamma": 3.0}"#, false);
    let out_dir = tmp.path().join("run");
    let out = ipslab(&["run", "--config", cfg.to_str().unwrap()], &out_dir);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let m: RunManifest = io::read_json(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(m.status, Status::Failed);
    assert_eq!(m.stages.len(), 1);
    assert_eq!(m.stages[0].name, "potentials");
    assert!(m.artifact("ensemble").is_none());
}

#[test]
fn pipeline_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), QUADRATIC, true);
    let run_dir = tmp.path().join("run");
    let out = ipslab(&["run", "--config", cfg.to_str().unwrap()], &run_dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m: RunManifest = io::read_json(&run_dir.join("manifest.json")).unwrap();
    assert_eq!(m.status, Status::Ok);
    for role in ["ensemble", "density.stationary", "density.l1", "coercivity", "learn"] {
        let a = m.artifact(role).unwrap_or_else(|| panic!("missing {role}"));
        let bytes = std::fs::read(run_dir.join(&a.path)).unwrap();
        assert_eq!(io::sha256_hex(&bytes), a.sha256, "{role}");
    }

    let manifest = run_dir.join("manifest.json");
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    assert_eq!(ipslab(&["report", "--manifest", manifest.to_str().unwrap()], &r1).status.code(), Some(0));
    assert_eq!(ipslab(&["report", "--manifest", manifest.to_str().unwrap()], &r2).status.code(), Some(0));
    for name in ["l1.csv", "coercivity.csv", "coefficients.csv", "spectra.csv"] {
        let a = std::fs::read(r1.join(name)).unwrap();
        assert_eq!(a, std::fs::read(r2.join(name)).unwrap(), "{name}");
        assert!(String::from_utf8(a).unwrap().lines().count() > 1, "{name} is empty");
    }
    let l1 = std::fs::read_to_string(r1.join("l1.csv")).unwrap();
    assert!(l1.starts_with("t,l1_distance\n"));
    assert_eq!(l1.lines().count(), 5);
}

#[test]
fn report_on_an_empty_manifest_warns_and_writes_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.json");
    std::fs::write(&manifest, r#"{"format":"ipslab.run.v1","config_sha256":"00","seed":0,"status":"OK","stages":[]}"#)
        .unwrap();
    let out = ipslab(&["report", "--manifest", manifest.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    for (name, header) in [
        ("l1.csv", "t,l1_distance"),
        ("coercivity.csv", "horizon,c_hat,stderr"),
        ("coefficients.csv", "basis_index,coefficient"),
        ("spectra.csv", "report,index,eigenvalue"),
    ] {
        assert_eq!(std::fs::read_to_string(tmp.path().join(name)).unwrap(), format!("{header}\n"));
    }
}

#[test]
fn simulate_subcommand_writes_binary_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let system = r#"{"n":3,"d":2,"potential":{"family":"power_shifted","a":1.0,"theta":1.5,"gamma":0.9},"dt":0.01,"t_end":0.1,"n_paths":4,"initial":{"kind":"point","x0":[0,0,1,0,0,1]},"seed":1,"snapshots":{"every":5}}"#;
    let out = ipslab(&["simulate", "--system", system, "--layout", "full", "--csv"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("ensemble.csv")).unwrap();
    // Header plus 4 paths at t = 0, 0.05, 0.1.
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    assert!(tmp.path().join("ensemble.bin").exists());
}

#[test]
fn pdtest_subcommand_reports_a_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = ipslab(
        &["pdtest", "--kernel", r#"{"kind":"gaussian","length":1.0}"#, "--n", "12", "--trials", "3"],
        tmp.path(),
    );
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("verdict"), "{text}");
}
