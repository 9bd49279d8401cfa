use std::path::Path;
use std::process::Command;

fn acrl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_acrl"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

const TINY: &str = r#"{
    "env": {"kind": "point_mass"},
    "families": [{"family": "L2"}],
    "variants": ["DPre", "SPre"],
    "seeds": [0],
    "total_steps": 300,
    "eval_interval": 150,
    "eval_episodes": 1,
    "final_eval_episodes": 2,
    "overrides": {"hidden": [8], "batch_size": 8, "learning_starts": 100}
}"#;

#[test]
fn run_writes_reports_and_report_rebuilds_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let status = acrl()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out)
        .args(["--jobs", "2"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["rewards.csv", "learning_curves.csv", "manifest.json", "records.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let rewards = std::fs::read_to_string(out.join("rewards.csv")).unwrap();
    assert!(rewards.contains("DPre") && rewards.contains("SPre"));

    let again = tmp.path().join("again");
    let status = acrl().args(["report", "--input"]).arg(&out).arg("--out-dir").arg(&again).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(rewards, std::fs::read_to_string(again.join("rewards.csv")).unwrap());
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let status = acrl()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--variant", "SAlpha", "--family", "O:budget=0.5", "--seed", "3", "--steps", "200"])
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let rewards = std::fs::read_to_string(out.join("rewards.csv")).unwrap();
    assert!(rewards.contains("SAlpha"));
    assert!(!rewards.contains("DPre"));
    assert!(rewards.contains("budget=0.5"));
}

#[test]
fn bad_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"total_steps": 100, "no_such_field": 1}"#);
    let status = acrl().args(["run", "--config"]).arg(&cfg).arg("--out-dir").arg(tmp.path()).output().unwrap();
    assert_eq!(status.status.code(), Some(1));

    let status = acrl().args(["run", "--family", "O:budget=-1"]).arg("--out-dir").arg(tmp.path()).output().unwrap();
    assert_ne!(status.status.code(), Some(0));
}
