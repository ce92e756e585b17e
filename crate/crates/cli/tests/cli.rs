use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diffswap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffswap")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn quick_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("quick.json");
    fs::write(
        &path,
        r#"{
  "sampler": {"num_steps": 9},
  "customization": {"train_steps": 5, "prior_count": 2, "prior_sampler": {"num_steps": 9}}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn dataset_swap_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = diffswap(&["make-dataset", "--count", "4", "--seed", "2", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["face_0000.png", "face_0003.json", "pairs.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let cfg = quick_config(dir.path());

    let adapter = dir.path().join("adapter.json");
    let out = diffswap(&["train-identity", "--source", p(&data.join("face_0000.png")), "--config", p(&cfg), "--out", p(&adapter)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (img, conds, report) = (dir.path().join("swap.png"), dir.path().join("conds"), dir.path().join("report.json"));
    let out = diffswap(&[
        "swap",
        "--source", p(&data.join("face_0000.png")),
        "--target", p(&data.join("face_0001.png")),
        "--landmarks", p(&data.join("face_0001.json")),
        "--config", p(&cfg),
        "--adapter", p(&adapter),
        "--out", p(&img),
        "--dump-conditions", p(&conds),
        "--report", p(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(img.exists() && conds.join("canny.png").exists() && conds.join("mask.png").exists());
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["metrics"]["cos_source"].is_f64());

    let (table, json) = (dir.path().join("table.txt"), dir.path().join("eval.json"));
    let out = diffswap(&[
        "evaluate",
        "--pairs", p(&data.join("pairs.json")),
        "--config", p(&cfg),
        "--out-table", p(&table),
        "--out-json", p(&json),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = fs::read_to_string(&table).unwrap();
    assert!(t.starts_with("Method") && t.contains("Ours"));
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(e["succeeded"], 2);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let out = diffswap(&["train-identity", "--source", p(&missing), "--out", p(&dir.path().join("a.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.png"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"feathr": 1}"#).unwrap();
    let out = diffswap(&["train-identity", "--source", p(&missing), "--config", p(&cfg), "--out", p(&dir.path().join("a.json"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = diffswap(&["make-dataset", "--count", "0", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selfcheck_passes() {
    let out = diffswap(&["selfcheck", "--seed", "4"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}
