use std::process::Command;

fn wfmfg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wfmfg"))
}

#[test]
fn solve_master_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"scenario":"zero-cost","master":{"n":8,"slices":4}}"#).unwrap();
    let out = dir.path().join("out");
    let status = wfmfg()
        .args(["solve-master", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    for f in ["surface.csv", "manifest.json", "verdict.json", "schema.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "solve-master");
    assert_eq!(manifest["seed_root"], 0);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"scenario":"voter","delta":0.2}"#).unwrap();
    let output = wfmfg()
        .args(["verify-moments", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("delta"));
}

#[test]
fn unknown_field_is_reported_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"scenario":"voter","master":{"n":8,"slicez":4}}"#).unwrap();
    let output = wfmfg()
        .args(["solve-master", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("master"));
}

#[test]
fn cli_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"scenario":"voter","seed":3,"simulation":{"n":4,"paths":2}}"#).unwrap();
    let out = dir.path().join("out");
    let status = wfmfg()
        .args(["simulate-n", "--seed", "9", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed_root"], 9);
}
