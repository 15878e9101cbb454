use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_secest"))
}

fn bundled(name: &str) -> PathBuf {
    secest::scenario_dir().join(format!("{name}.json"))
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    bin()
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("SECEST_OUT_DIR")
        .output()
        .unwrap()
}

#[test]
fn run_twice_gives_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&bundled("example4"), d, &["--window", "50"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trajectory.csv", "frames.csv", "isolation_windows.csv", "isolation_steps.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 1);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&bundled("example2"), &a, &["--seed", "4"]).status.success());
    assert!(run(&bundled("example2"), &b, &["--seed", "5"]).status.success());
    assert_ne!(fs::read(a.join("trajectory.csv")).unwrap(), fs::read(b.join("trajectory.csv")).unwrap());
}

#[test]
fn horizon_flag_sets_row_count() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(&bundled("example3"), tmp.path(), &["--horizon", "30"]).status.success());
    let text = fs::read_to_string(tmp.path().join("frames.csv")).unwrap();
    assert_eq!(text.lines().count(), 32);
    assert!(text.lines().next().unwrap().starts_with("k,sigma,"));
}

#[test]
fn env_var_is_fallback_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--config"])
        .arg(bundled("example2"))
        .env("SECEST_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("trajectory.csv").exists());
}

#[test]
fn plots_for_example3_cover_whole_horizon() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(&bundled("example3"), tmp.path(), &[]).status.success());
    let o = bin().args(["plots", "--in"]).arg(tmp.path()).output().unwrap();
    assert!(o.status.success());
    let mut rdr = csv::Reader::from_path(tmp.path().join("plot_states.csv")).unwrap();
    let ks: Vec<usize> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(ks, (0..=199).collect::<Vec<_>>());
}

#[test]
fn plots_for_example4_have_twenty_windows() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(&bundled("example4"), tmp.path(), &["--window", "50"]).status.success());
    assert!(bin().args(["plots", "--in"]).arg(tmp.path()).status().unwrap().success());
    let mut rdr = csv::Reader::from_path(tmp.path().join("plot_isolation.csv")).unwrap();
    let windows: std::collections::BTreeSet<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(windows.len(), 20);
}

#[test]
fn plots_on_empty_frames_file_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("frames.csv"), "").unwrap();
    fs::write(tmp.path().join("trajectory.csv"), "").unwrap();
    let o = bin().args(["plots", "--in"]).arg(tmp.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let body = fs::read_to_string(tmp.path().join("plot_states.csv")).unwrap();
    assert!(body.lines().count() <= 1);
}

#[test]
fn calibrate_with_zero_trials_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c.json");
    let o = bin()
        .args(["calibrate", "--config"])
        .arg(bundled("example4"))
        .args(["--trials", "0", "--horizon", "100", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn calibrate_writes_loadable_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c.json");
    let o = bin()
        .args(["calibrate", "--config"])
        .arg(bundled("example4"))
        .args(["--trials", "4", "--horizon", "200", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = secest::config::load_config(&out).unwrap();
    assert!(cfg.missing_iss().is_empty());
    assert_eq!(cfg.iss.len(), 10);
}

#[test]
fn calibrate_refuses_to_overwrite_source() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("ex.json");
    fs::copy(bundled("example4"), &src).unwrap();
    let before = fs::read(&src).unwrap();
    let o = bin()
        .args(["calibrate", "--config"])
        .arg(&src)
        .args(["--trials", "2", "--horizon", "50", "--out"])
        .arg(&src)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert_eq!(fs::read(&src).unwrap(), before);
}

#[test]
fn validate_reports_all_problems_with_exit_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(bundled("example1")).unwrap()).unwrap();
    doc["scenario"]["q"] = 2.into();
    doc["observers"]["bank"].as_object_mut().unwrap().remove("J:1,2");
    fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let o = bin().args(["validate", "--config"]).arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("scenario.q"), "{err}");
}

#[test]
fn malformed_json_reports_position() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("broken.json");
    fs::write(&path, "{\n  \"name\": \"x\",\n  oops\n}").unwrap();
    let o = bin().args(["validate", "--config"]).arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn missing_config_is_io_error() {
    let o = bin().args(["validate", "--config", "/nonexistent/x.json"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bundled_configs_validate() {
    for name in ["example1", "example2", "example3", "example4"] {
        let o = bin().args(["validate", "--config"]).arg(bundled(name)).output().unwrap();
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
