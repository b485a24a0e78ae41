use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn decodet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decodet"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    assert_eq!(decodet(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(decodet(&["split"]).status.code(), Some(1));
    assert_eq!(decodet(&["nonsense"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_two_with_json_error() {
    let o = decodet(&["stats", "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout_json(&o)["error"]
        .as_str()
        .unwrap()
        .contains("nonexistent"));
}

#[test]
fn unknown_gradcheck_op_exits_one() {
    assert_eq!(
        decodet(&["gradcheck", "--op", "nope"]).status.code(),
        Some(1)
    );
}

#[test]
fn invalid_split_ratios_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    assert!(decodet(&["toygen", "--images", "3", "--out", p(&out)])
        .status
        .success());
    let o = decodet(&[
        "split",
        "--manifest",
        p(&out.join("manifest.json")),
        "--ratios",
        "8:0:x",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn toy_pipeline_reports_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    let manifest = toy.join("manifest.json");
    let o = decodet(&["toygen", "--images", "6", "--seed", "2", "--out", p(&toy)]);
    assert_eq!(stdout_json(&o)["images"], 6);

    let o = decodet(&["split", "--manifest", p(&manifest), "--ratios", "2:1"]);
    assert!(o.status.success());
    let o = decodet(&["stats", "--manifest", p(&manifest)]);
    assert!(stdout_json(&o).is_object());

    let o = decodet(&["correlate", "--manifest", p(&manifest)]);
    assert!(stdout_json(&o)["rho"].as_f64().unwrap() < 0.0);

    let stage = dir.path().join("stage.json");
    std::fs::write(&stage, r#"{"epochs":1,"lr":0.01,"model":{"dck":null}}"#).unwrap();
    let run = dir.path().join("run");
    let o = decodet(&[
        "train",
        "--manifest",
        p(&manifest),
        "--stage",
        p(&stage),
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));

    let preds = dir.path().join("preds.json");
    let o = decodet(&[
        "predict",
        "--manifest",
        p(&manifest),
        "--checkpoint",
        p(&run.join("final.json")),
        "--out",
        p(&preds),
        "--split",
        "real_test",
    ]);
    assert!(o.status.success());
    let o = decodet(&[
        "eval",
        "--manifest",
        p(&manifest),
        "--preds",
        p(&preds),
        "--split",
        "real_test",
    ]);
    let report = stdout_json(&o);
    let map = report["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
}
