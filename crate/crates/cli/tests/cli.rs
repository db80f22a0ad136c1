use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sono_align::taxonomy::{default_catalog, TaskId};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sono-align"));
    cmd.env_remove("SONO_ALIGN_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: Value) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

/// A small corpus in `dir/data`, generated through the binary.
fn small_corpus(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_config(
        dir,
        json!({
            "synth": {"n_cases": 12, "images_per_case": [2, 3], "d_in": 8, "seed": 3},
            "train": {"epochs": 2, "batch_size": 8, "hidden": 16, "dim": 8, "d_embed": 8, "attn_dim": 8, "heads": 2},
            "ks": [1, 5]
        }),
    );
    let out = dir.join("data");
    assert_ok(&run(&["gen-data", "--config", s(&cfg), "--out", s(&out)]));
    (cfg, out.join("records.jsonl"), out.join("split.json"))
}

#[test]
fn gen_data_splits_ten_cases_six_two_two_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), json!({"synth": {"n_cases": 10, "images_per_case": [1, 2]}}));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    assert_ok(&o);
    assert!(stdout(&o).contains("train 6, val 2, test 2"), "{}", stdout(&o));
    assert_ok(&run(&["gen-data", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["records.jsonl", "split.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_errors_exit_two_and_io_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), json!({"split": {"ratios": [0.7, 0.2, 0.2]}}));
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ratios"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), json!({"train": {"learning_rate": 0.1}}));
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));

    let missing = dir.path().join("absent.json");
    assert_eq!(run(&["gen-data", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn seed_override_is_logged_and_validated() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = bin().args(["gen-data", "--out", s(&out)]).env("SONO_ALIGN_SEED", "17").output().unwrap();
    assert_ok(&o);
    assert!(stderr(&o).contains("SONO_ALIGN_SEED"), "{}", stderr(&o));
    let o = bin().args(["gen-data", "--out", s(&out)]).env("SONO_ALIGN_SEED", "x").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let (cfg, data, split) = small_corpus(dir.path());
    let ckpt = dir.path().join("model.json");
    let train = |ckpt: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--split", s(&split), "--out", s(ckpt)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_ok(&o);
        o
    };
    let o = train(&ckpt, &["--ablation", "Dsg"]);
    assert!(stdout(&o).contains("validation metrics"), "{}", stdout(&o));
    let log = std::fs::read_to_string(dir.path().join("model.log.jsonl")).unwrap();
    let steps: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .collect();
    assert!(!steps.is_empty());
    assert!(steps.iter().all(|v| v["l_semantic"] == 0.0));

    let again = dir.path().join("again.json");
    train(&again, &["--ablation", "Dsg"]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let init = dir.path().join("init.json");
    train(&init, &["--epochs", "0"]);
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&init).unwrap()).unwrap();
    assert_eq!(doc["optimizer_step"], 0);

    let report = dir.path().join("report.json");
    let manifest = s(&split);
    let o = run(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test", "--manifest",
        manifest, "--report", s(&report),
    ]);
    assert_ok(&o);
    assert!(stdout(&o).contains("R@5"), "{}", stdout(&o));
    let schema: Value =
        serde_json::from_str(include_str!("../schema/metric_report.schema.json")).unwrap();
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let emb = dir.path().join("emb.csv");
    let o = run(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&emb)]);
    assert_ok(&o);
    let csv = std::fs::read_to_string(&emb).unwrap();
    assert!(csv.starts_with("image_id,case_id,diagnosis,image_0"));
    assert_eq!(csv.lines().count(), std::fs::read_to_string(&data).unwrap().lines().count() + 1);
}

#[test]
fn eval_rejects_a_checkpoint_from_another_catalog() {
    let dir = TempDir::new().unwrap();
    let (cfg, data, split) = small_corpus(dir.path());
    let ckpt = dir.path().join("model.json");
    assert_ok(&run(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--split", s(&split), "--out", s(&ckpt), "--epochs", "0",
    ]));
    let catalog = default_catalog();
    let margins = catalog.task(TaskId::MARGINS);
    let n = margins.len();
    let matrix: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.25 }).collect()).collect();
    let table = dir.path().join("margins.json");
    std::fs::write(&table, json!({"task": "T5", "labels": margins.labels(), "matrix": matrix}).to_string()).unwrap();
    let o = run(&["eval", "--sim-table", s(&table), "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("trained against taxonomy"), "{}", stderr(&o));
}

fn record(image_id: &str, labels: Value) -> String {
    json!({"case_id": "c1", "image_id": image_id, "features": [0.1, 0.2], "caption": "a cyst", "labels": labels})
        .to_string()
}

#[test]
fn eval_lists_tasks_without_labels_as_skipped() {
    let dir = TempDir::new().unwrap();
    let (cfg, data, split) = small_corpus(dir.path());
    let ckpt = dir.path().join("model.json");
    assert_ok(&run(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--split", s(&split), "--out", s(&ckpt), "--epochs", "0",
    ]));
    let stripped: String = std::fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v["labels"].as_object_mut().unwrap().remove("T9");
            v.to_string() + "\n"
        })
        .collect();
    let no_vascularity = dir.path().join("stripped.jsonl");
    std::fs::write(&no_vascularity, stripped).unwrap();
    let o = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&no_vascularity)]);
    assert_ok(&o);
    assert!(stdout(&o).contains("skipped tasks (no labels): T9"), "{}", stdout(&o));
}

#[test]
fn show_prior_and_inspect_graph() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("records.jsonl");
    let lines = [
        record("a", json!({"T3": ["Cyst"], "T4": ["Oval"]})),
        record("b", json!({"T3": ["Cyst"], "T4": ["Oval"]})),
        record("c", json!({"T3": ["Cyst", "Mass"], "T4": ["Oval"], "T5": ["Well-defined"], "T6": ["Anechoic"]})),
    ];
    std::fs::write(&data, lines.join("\n")).unwrap();

    let o = run(&["show-prior", "--data", s(&data), "--batch-ids", "a,b"]);
    assert_ok(&o);
    let text = stdout(&o);
    let row_a = text.lines().find(|l| l.starts_with("a ")).unwrap();
    assert_eq!(row_a.split_whitespace().collect::<Vec<_>>(), ["a", "1.000000", "1.000000"]);

    let dot = dir.path().join("c.dot");
    let o = run(&["inspect-graph", "--data", s(&data), "--image-id", "c", "--dot", s(&dot)]);
    assert_ok(&o);
    assert!(stdout(&o).contains("2 diagnosis nodes, 3 attribute nodes, 6 edges"), "{}", stdout(&o));
    assert!(std::fs::read_to_string(&dot).unwrap().starts_with("graph"));

    assert_eq!(run(&["inspect-graph", "--data", s(&data), "--image-id", "zz"]).status.code(), Some(2));
    assert_eq!(run(&["show-prior", "--data", s(&data), "--batch-ids", "a,zz"]).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_three() {
    let dir = TempDir::new().unwrap();
    let (_, data, split) = small_corpus(dir.path());
    let cfg = write_config(dir.path(), json!({"train": {"epochs": 3, "batch_size": 8, "lr": 1e200}}));
    let ckpt = dir.path().join("model.json");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--split", s(&split), "--out", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
