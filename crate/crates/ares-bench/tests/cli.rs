//! End-to-end checks of the command-line surface.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ares-bench"))
}

#[test]
fn tiny_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--psi",
            "1",
            "--rounds",
            "25",
            "--sims",
            "2",
            "--seed",
            "7",
            "--policies",
            "oracle,random,ares",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["regret_1.csv", "diagnostics_1.csv", "residuals_1.csv", "summary.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("median final regret"));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        r#"
        [environment]
        psi = [2.0]
        horizon = 10
        num_sims = 1
        burn_in = 20

        [policies]
        ids = ["random"]
        "#,
    )
    .unwrap();
    let out_dir = dir.path().join("results");
    let out = bin()
        .args(["--config"])
        .arg(&config_path)
        .args(["--rounds", "5", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let regret = std::fs::read_to_string(out_dir.join("regret_2.csv")).unwrap();
    // 5 rounds (the override), one policy.
    assert_eq!(regret.lines().count(), 1 + 5);
}

#[test]
fn bad_policy_id_fails_cleanly() {
    let out = bin()
        .args(["--policies", "nonsense", "--rounds", "5", "--sims", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown policy id"), "stderr: {stderr}");
}
