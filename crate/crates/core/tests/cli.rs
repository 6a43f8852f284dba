use std::fs;
use std::process::Command;

fn gmc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gmc")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn unknown_experiment_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (code, err) = gmc(&["no-such-thing", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown experiment"));
    assert!(!out.exists());
}

#[test]
fn unknown_key_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "n = 64\ncolour = red\n").unwrap();
    let out = dir.path().join("out");
    let (code, err) = gmc(&["meander", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("colour"));
    assert!(!out.exists());
}

#[test]
fn malformed_and_missing_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "depths 8 16\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(gmc(&["cascade-mean", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 2);
    let missing = dir.path().join("missing.cfg");
    assert_eq!(gmc(&["cascade-mean", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 2);
    assert!(!out.exists());
}

#[test]
fn out_of_range_parameters_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "epsilon = 0.5\nmargin = 0.05\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(gmc(&["field-sample", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 2);
    assert!(!out.exists());
}

#[test]
fn field_sample_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (code, _) = gmc(&["field-sample", "--seed", "5", "--quiet", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 5);
    assert_eq!(json["passed"], true);
    let table = json["runs"][0]["tables"][0].as_str().unwrap();
    let csv = fs::read_to_string(out.join(table)).unwrap();
    assert!(csv.starts_with("re,im,value,variance\n"));
}

#[test]
fn shipped_configs_are_accepted() {
    use gmc_core::config::Params;
    use gmc_core::harness::Plan;
    for name in ["battery.cfg", "smoke.cfg"] {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        let params = Params::parse(&fs::read_to_string(path).unwrap()).unwrap();
        Plan::new("battery", params, None, None).unwrap();
    }
}
