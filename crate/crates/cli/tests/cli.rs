use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn offnadir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offnadir")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn write_json(path: &Path, v: &Value) -> String {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path.display().to_string()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_usage_errors() {
    let out = offnadir(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["datagen", "train", "adapt", "distill", "dml", "eval", "bench", "compare", "report"] {
        assert!(text.contains(cmd), "help lists {cmd}");
    }
    assert_eq!(offnadir(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(offnadir(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(offnadir(&["report", "--in", "x", "--format", "pdf"]).status.code(), Some(2));
}

#[test]
fn failed_runs_exit_one_with_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let out = offnadir(&["eval", "--out", out_dir.to_str().unwrap(), "--set", "checkpoint=/nonexistent.safetensors", "--set", "data.root=/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let v: Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["command"], "eval");
    assert!(v["error"]["message"].as_str().unwrap().len() > 0);

    let bad = write_json(&dir.path().join("bad.json"), &json!({"seed": 1, "bogus": true, "setting": "S-S"}));
    let out = offnadir(&["train", "--config", &bad, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(v["error"]["kind"], "Config");

    let out = offnadir(&["train", "--out", out_dir.to_str().unwrap(), "--set", "setting=Ev-S"]);
    assert_eq!(out.status.code(), Some(1));
}

fn tiny_dataset() -> Value {
    let role = |train: usize, val: usize, kind: &str, w: [f64; 4]| json!({"train": train, "val": val, "label_kind": kind, "strata_weights": w});
    json!({
        "seed": 4,
        "tile_size": 32,
        "view": {"off_nadir_tan": 0.0625},
        "T": role(8, 4, "noisy", [0.4, 0.3, 0.2, 0.1]),
        "S": role(8, 4, "clean", [0.4, 0.3, 0.2, 0.1]),
        "Ev": role(0, 8, "clean", [0.25; 4]),
    })
}

#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let data = p("data");

    let cfg = write_json(&dir.path().join("data.json"), &tiny_dataset());
    ok(&offnadir(&["datagen", "--config", &cfg, "--out", &data]));
    for role in ["T", "S", "Ev"] {
        assert!(Path::new(&data).join(role).join("manifest.json").exists(), "{role} manifest");
    }
    // Regenerating the same root without --force is refused.
    assert_eq!(offnadir(&["datagen", "--config", &cfg, "--out", &data]).status.code(), Some(1));

    let train = json!({"epochs": 2, "batch_size": 4, "lr": 0.001});
    let job = write_json(
        &dir.path().join("train.json"),
        &json!({"data": {"root": data}, "setting": "T-T", "model": "mbconv", "input_size": 32, "train": train}),
    );
    ok(&offnadir(&["train", "--config", &job, "--seed", "3", "--set", "train.epochs=1", "--out", &p("teacher")]));
    let snap: Value = serde_json::from_slice(&std::fs::read(p("teacher") + "/config.json").unwrap()).unwrap();
    assert_eq!(snap["train"]["epochs"], 1);
    assert_eq!(snap["train"]["seed"], 3);
    assert_eq!(snap["model_seed"], 3);
    let record: Value = serde_json::from_slice(&std::fs::read(p("teacher") + "/model.json").unwrap()).unwrap();
    assert_eq!(record["train_set"], "T/train");
    assert_eq!(record["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(offnadir(&["train", "--config", &job, "--out", &p("teacher")]).status.code(), Some(1));

    let ckpt = p("teacher") + "/model.safetensors";
    let adapt = write_json(&dir.path().join("adapt.json"), &json!({"data": {"root": data}, "from": ckpt, "train": train}));
    ok(&offnadir(&["adapt", "--config", &adapt, "--out", &p("sda")]));
    let record: Value = serde_json::from_slice(&std::fs::read(p("sda") + "/model.json").unwrap()).unwrap();
    assert_eq!(record["method"], "sda");
    assert_eq!(record["train_set"], "S/train");

    let ev = write_json(&dir.path().join("eval.json"), &json!({"data": {"root": data}, "checkpoint": p("sda") + "/model.safetensors"}));
    ok(&offnadir(&["eval", "--config", &ev, "--out", &p("eval")]));
    for f in ["eval.json", "confusion.csv", "stratified.json", "stratified.md"] {
        assert!(Path::new(&p("eval")).join(f).exists(), "{f}");
    }

    let plan = write_json(
        &dir.path().join("plan.json"),
        &json!({
            "name": "smoke",
            "input_size": 32,
            "data": {"root": data},
            "roster": ["vgg_like", "mbconv"],
            "teacher": "vgg_like",
            "methods": ["baseline", "sda"],
            "train": train,
            "pretrain": train,
        }),
    );
    ok(&offnadir(&["compare", "--config", &plan, "--seed", "2", "--out", &p("cmp")]));
    let md = std::fs::read_to_string(p("cmp") + "/report.md").unwrap();
    assert!(md.contains("### Knowledge transfer comparison"), "{md}");
    assert!(md.contains("Supervised domain adaptation (SDA)"), "{md}");
    assert!(md.contains("### Improvements with SDA vs. without SDA"), "{md}");
    assert!(Path::new(&p("cmp")).join("stratified.md").exists());
    assert!(Path::new(&p("cmp")).join("runs").read_dir().unwrap().count() >= 6);

    ok(&offnadir(&["report", "--in", &p("cmp"), "--format", "csv", "--out", &p("rendered")]));
    let csv = std::fs::read_to_string(p("rendered") + "/report.csv").unwrap();
    assert!(csv.lines().count() > 4);
    ok(&offnadir(&["report", "--in", &p("cmp"), "--format", "md", "--out", &p("rendered")]));
    assert_eq!(std::fs::read_to_string(p("rendered") + "/report.md").unwrap(), md);
}
