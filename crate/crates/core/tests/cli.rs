use std::path::Path;
use std::process::Command;

fn msgca(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_msgca"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .expect("spawn msgca");
    assert!(
        out.status.success(),
        "msgca {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path) {
    msgca(&[
        "synth",
        "--stocks",
        "5",
        "--days",
        "70",
        "--dim",
        "8",
        "--seed",
        "4",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    for f in [
        "prices.csv",
        "documents.jsonl",
        "embeddings.jsonl",
        "graph.tsv",
    ] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f} empty");
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn eval_reproduces_train_test_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    synth(&data);
    msgca(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "2",
        "--d",
        "8",
        "--ws",
        "5",
        "--lr",
        "0.001",
    ]);
    let metrics = json(&run.join("metrics.json"));
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    msgca(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.ckpt").to_str().unwrap(),
    ]);
    let eval = json(&run.join("eval.json"));
    assert_eq!(eval["test_mcc"], metrics["test_mcc"]);
    assert_eq!(eval["test_acc"], metrics["test_acc"]);
}

#[test]
fn ablate_reports_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("ab");
    synth(&data);
    msgca(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--d",
        "8",
        "--ws",
        "5",
        "--variants",
        "full,drop_docs",
        "--seeds",
        "0,1",
    ]);
    let csv = std::fs::read_to_string(run.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("full"));
    assert!(rows[1].starts_with("drop_docs"));
}

#[test]
fn bad_flags_fail_with_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_msgca"))
        .args(["train", "--variant", "nonsense"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
