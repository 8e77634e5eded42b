use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"kind": "synthetic", "spec": {"classes": 3, "mentions": 160, "no_relation_share": 0.4}, "test_mentions": 60},
  "split": {"labeled_fraction": 0.2, "unlabeled_fraction": 0.5, "seed": 0},
  "selftrain": {"num_batches": 2, "initial_epochs": 1, "rcn_epochs": 1, "learning_rate": 0.01},
  "network": {"hidden": 4, "embedding": 3},
  "seeds": [0, 1]
}"#;

fn metasre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metasre")).args(args).env_remove("METASRE_OUT_DIR").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn only(dir: &Path, prefix: &str, suffix: &str) -> PathBuf {
    let found: Vec<String> = listing(dir).into_iter().filter(|n| n.starts_with(prefix) && n.ends_with(suffix)).collect();
    assert_eq!(found.len(), 1, "{found:?}");
    dir.join(&found[0])
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"classes": 4, "mentions": 75, "seed": 3}"#).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = metasre(&["gen-data", "--config", s(&spec), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 75);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.jsonl");
    assert!(metasre(&["gen-data", "--config", s(&spec), "--out", s(&c), "--seed", "4"]).status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn invalid_skew_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"classes": 2, "no_relation_share": null, "class_shares": [0.5, 0.3]}"#).unwrap();
    let out = dir.path().join("x.jsonl");
    let o = metasre(&["gen-data", "--config", s(&spec), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert!(!out.exists());
}

#[test]
fn bad_configs_exit_with_two() {
    let (dir, cfg) = setup();
    let bogus = dir.path().join("bogus.json");
    std::fs::write(&bogus, r#"{"seeds": [0], "learning_rate": 1}"#).unwrap();
    assert_eq!(metasre(&["train", "--config", s(&bogus)]).status.code(), Some(2));
    assert_eq!(metasre(&["train", "--config", s(&dir.path().join("missing.json"))]).status.code(), Some(2));
    assert_eq!(metasre(&["train", "--config", s(&cfg), "--z-percent", "0"]).status.code(), Some(2));
    assert_eq!(metasre(&["train", "--config", s(&cfg), "--mode", "nonsense"]).status.code(), Some(2));
}

#[test]
fn empty_sweep_exits_with_two() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = metasre(&["sweep", "--config", s(&cfg), "--axis", "z_percent", "--values", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = metasre(&["sweep", "--config", s(&cfg), "--axis", "depth", "--values", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_one_report_per_seed_and_reruns_identically() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = metasre(&["train", "--config", s(&cfg), "--out", s(out), "--jobs", "1"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("final F1"));
    }
    let names = listing(&a);
    assert_eq!(names.iter().filter(|n| n.starts_with("report_")).count(), 2);
    assert_eq!(names.iter().filter(|n| n.starts_with("metrics_")).count(), 2);
    assert_eq!(names, listing(&b));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    // one row per iteration plus the supervised starting point
    assert_eq!(csv_rows(&only(&a, "metrics_", "seed0.csv")), 3);
}

#[test]
fn self_training_mode_is_the_three_switches() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(metasre(&["train", "--config", s(&cfg), "--seed", "1", "--mode", "self_training", "--out", s(&a)]).status.success());
    assert!(metasre(&[
        "train", "--config", s(&cfg), "--seed", "1", "--mode", "metasre", "--no-meta", "--no-selection", "--no-exploitation",
        "--out", s(&b),
    ])
    .status
    .success());
    assert_eq!(listing(&a), listing(&b));
    for n in listing(&a) {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn ablate_has_four_rows_and_sweep_five() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = metasre(&["ablate", "--config", s(&cfg), "--seed", "0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&only(&out, "ablation_", ".csv")), 4);
    let o = metasre(&["sweep", "--config", s(&cfg), "--seed", "0", "--axis", "z_percent", "--values", "60,70,80,90,100", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = only(&out, "sweep_z_percent_", ".csv");
    assert_eq!(csv_rows(&csv), 5);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("z_percent,60"));
}

#[test]
fn output_directory_precedence() {
    let (dir, cfg) = setup();
    let env_dir = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_metasre"))
        .args(["train", "--config", s(&cfg), "--seed", "0"])
        .env("METASRE_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(listing(&env_dir).iter().any(|n| n.starts_with("report_")));
    let flag_dir = dir.path().join("from_flag");
    let o = Command::new(env!("CARGO_BIN_EXE_metasre"))
        .args(["train", "--config", s(&cfg), "--seed", "0", "--out", s(&flag_dir)])
        .env("METASRE_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(listing(&flag_dir).len(), 5);
}

#[test]
fn split_and_eval_round_trip() {
    let (dir, cfg) = setup();
    let split = dir.path().join("split");
    let o = metasre(&["split", "--config", s(&cfg), "--seed", "0", "--out", s(&split)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let unlabeled = std::fs::read_to_string(split.join("unlabeled_01.jsonl")).unwrap();
    assert!(!unlabeled.contains("relation"));
    assert_eq!(std::fs::read_to_string(split.join("labeled.jsonl")).unwrap().lines().count(), 32);

    let train = dir.path().join("train");
    assert!(metasre(&["train", "--config", s(&cfg), "--seed", "0", "--out", s(&train)]).status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(only(&train, "report_", ".json")).unwrap()).unwrap();
    let final_f1 = report["iterations"].as_array().unwrap().last().unwrap()["test"]["f1"].as_f64().unwrap();
    let metrics = dir.path().join("eval.json");
    let o = metasre(&[
        "eval", "--checkpoint", s(&only(&train, "model_", ".json")), "--data", s(&split.join("test.jsonl")), "--out", s(&metrics),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(m["f1"].as_f64().unwrap(), final_f1);
}
