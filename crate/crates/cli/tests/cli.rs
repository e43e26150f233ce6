use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vbident(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbident")).args(args).env("VBIDENT_LOG", "warn").output().unwrap()
}

fn desk() -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small enough to run every stage in a second or two.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = desk();
    c["ensemble"]["count"] = 4.into();
    c["signals"]["synthetic"] = 2.into();
    c["simulation"]["horizon_s"] = 1200.0.into();
    c["simulation"]["stride"] = 20.into();
    c["sae"]["epochs"] = 5.into();
    c["transfer"] = serde_json::Value::Null;
    c["forecaster"]["window"] = 3.into();
    c["forecaster"]["stage1"]["epochs"] = 2.into();
    c["forecaster"]["stage2"]["epochs"] = 1.into();
    c["identify"]["limit_horizon_s"] = 300.0.into();
    let path = dir.join("tiny.json");
    std::fs::write(&path, c.to_string()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identify_without_sae_artifacts_exits_3_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = vbident(&["identify", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sae") && err.contains("model.vbnn"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = desk();
    c["sae"]["momentum"] = 0.9.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, c.to_string()).unwrap();
    let o = vbident(&["simulate", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));

    let o = vbident(&[
        "simulate",
        "--config",
        s(&tiny_config(dir.path())),
        "--out",
        s(&dir.path().join("o")),
        "--workers",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = vbident(&["simulate", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = vbident(&["simulate", "--config", s(&cfg), "--out", s(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulate/dataset.vbds"));

    // later stages pick up the stored configuration
    for stage in ["train-sae", "report"] {
        let o = vbident(&[stage, "--out", s(&out), "--epochs", "3"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let hist = std::fs::read_to_string(out.join("report/reconstruction_histogram.csv")).unwrap();
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("simulate/dataset.json")).unwrap()).unwrap();
    let rows = sidecar["rows"].as_u64().unwrap();
    let total: f64 = hist.lines().skip(1).flat_map(|l| l.split(',').skip(2).map(|v| v.parse::<f64>().unwrap())).sum();
    assert_eq!(total as u64, 4 * rows);

    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(stored["sae"]["epochs"], 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sae/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "train-sae");
    assert_eq!(manifest["inputs"]["simulate/dataset.vbds"].as_str().unwrap().len(), 64);
}
