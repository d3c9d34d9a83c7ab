use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "image_size=8",
    "--set", "blocks=2",
    "--set", "channels=4",
    "--set", "synth_classes=10",
    "--set", "synth_per_class=8",
    "--set", "eval_episodes=24",
    "--episodes-per-epoch", "12",
    "--set", "epochs=1",
];

fn owfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owfs"))
        .args(args)
        .env("OWFS_THREADS", "1")
        .output()
        .expect("spawn owfs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = owfs(args);
    assert!(
        out.status.success(),
        "owfs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_tiny<'a>(head: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(TINY);
    v.extend_from_slice(&["--out", out]);
    v
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("a");
    let run_s = run.to_str().unwrap();
    run_ok(&with_tiny(&["train", "--seed", "3"], run_s));
    for f in ["config.cfg", "checkpoint.owfs", "train_report.json", "train.csv", "eval_report.json", "eval.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(fs::read_to_string(run.join("train.csv")).unwrap().starts_with("epoch,loss,acc,seconds\n"));

    let ev = dir.path().join("ev");
    let ckpt = run.join("checkpoint.owfs");
    run_ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    let a = json(&run.join("eval_report.json"));
    let b = json(&ev.join("eval_report.json"));
    assert_eq!(a["accuracy"], b["accuracy"]);
    assert_eq!(a["correct"], b["correct"]);

    let again = dir.path().join("b");
    let cfg = run.join("config.cfg");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(
        fs::read(run.join("checkpoint.owfs")).unwrap(),
        fs::read(again.join("checkpoint.owfs")).unwrap()
    );
    assert_eq!(json(&run.join("eval_report.json")), json(&again.join("eval_report.json")));
}

#[test]
fn unknown_key_exits_two_and_lists_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = owfs(&["train", "--set", "learning_rate=1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate") && err.contains("episodes_per_epoch"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_dataset_exits_two_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let missing = dir.path().join("no_such_dir");
    let o = owfs(&["train", "--data-root", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn sweep_records_insufficient_supports_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = owfs(&with_tiny(&["sweep", "--head", "two_way_normal", "--shots", "1,2"], out.to_str().unwrap()));
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis_value,head,order,accuracy,ci_low,ci_high,seconds_per_epoch");
    assert!(lines[1].starts_with("1,two_way_normal,") && lines[1].contains("failed"), "{csv}");
    assert!(!lines[2].contains("failed"), "{csv}");
    let k1 = json(&out.join("shots_1/cell.json"));
    assert!(k1["error"].as_str().unwrap().contains("insufficient supports"));

    let k2 = json(&out.join("shots_2/cell.json"));
    let row: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(row[3].parse::<f64>().unwrap(), k2["accuracy"].as_f64().unwrap());
    assert_eq!(row[4].parse::<f64>().unwrap(), k2["ci_low"].as_f64().unwrap());
    assert_eq!(row[5].parse::<f64>().unwrap(), k2["ci_high"].as_f64().unwrap());
}

#[test]
fn sweep_over_heads_gives_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    run_ok(&with_tiny(
        &[
            "sweep",
            "--axis",
            "head",
            "--values",
            "two_way_matching,two_way_proto,two_way_normal,one_way_proto,one_way_normal",
        ],
        out.to_str().unwrap(),
    ));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "{csv}");
}

#[test]
fn inspect_checkpoint_lists_entries() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("a");
    run_ok(&with_tiny(&["train"], run.to_str().unwrap()));
    let ckpt = run.join("checkpoint.owfs");
    let o = run_ok(&["inspect-checkpoint", ckpt.to_str().unwrap(), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = v["entries"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"optim.t"), "{names:?}");
    assert!(v["config"].as_str().unwrap().contains("head = one_way_proto"));
}

#[test]
fn bench_writes_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let mut args = with_tiny(&["bench", "--pairs", "proto"], out.to_str().unwrap());
    args.extend_from_slice(&["--epochs", "4"]);
    run_ok(&args);
    let ratios = fs::read_to_string(out.join("ratios.csv")).unwrap();
    assert!(ratios.starts_with("pair,ratio\n"), "{ratios}");
    assert_eq!(ratios.lines().count(), 2);
    assert!(out.join("bench.json").exists() && out.join("bench.csv").exists());
}

#[test]
fn multi_seed_train_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let mut args = with_tiny(&["train"], out.to_str().unwrap());
    args.extend_from_slice(&["--set", "seeds=1,0"]);
    run_ok(&args);
    let s = json(&out.join("summary.json"));
    assert_eq!(s["test_acc"]["n"], 2);
    assert!(out.join("seed0/eval_report.json").exists());
    assert!(out.join("seed1/checkpoint.owfs").exists());
}
