use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn longer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = longer(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_config() -> Value {
    json!({
        "n_users": 20, "samples_per_user": 4, "vocab": 16, "n_interests": 8,
        "l_max": 32, "min_events": 16, "interests_per_user": 2,
        "drift_rate": 0.05, "noise_rate": 0.0, "event_noise_rate": 0.02,
        "n_actions": 2, "n_profiles": 2, "plant_range": null
    })
}

fn model_config() -> Value {
    json!({
        "seq_len": 32, "item_dim": 2, "merge_factor": 4, "global_tokens": 3, "queries": 4,
        "heads": 1, "item_emb_dim": 4, "action_emb_dim": 2, "time_emb_dim": 2,
        "n_items": 16, "n_actions": 2, "n_users": 20, "n_profiles": 2, "head_hidden": 8,
        "train": { "epochs": 2, "batch_size": 8, "lr": 0.003, "seed": 5, "holdout": 0.25 }
    })
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    model_cfg: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let gen_cfg = root.join("gen.json");
    fs::write(&gen_cfg, gen_config().to_string()).unwrap();
    let model_cfg = root.join("model.json");
    fs::write(&model_cfg, model_config().to_string()).unwrap();
    let data = root.join("data.jsonl");
    ok(&["gen", "--config", s(&gen_cfg), "--seed", "3", "--out", s(&data)]);
    Fixture {
        _dir: dir,
        root,
        data,
        model_cfg,
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let f = fixture();
    let again = f.root.join("again.jsonl");
    ok(&["gen", "--config", s(&f.root.join("gen.json")), "--seed", "3", "--out", s(&again)]);
    assert_eq!(fs::read(&f.data).unwrap(), fs::read(&again).unwrap());
    let other = f.root.join("other.jsonl");
    ok(&["gen", "--config", s(&f.root.join("gen.json")), "--seed", "4", "--out", s(&other)]);
    assert_ne!(fs::read(&f.data).unwrap(), fs::read(&other).unwrap());
    let manifest = read_json(&f.root.join("data.jsonl.manifest.json"));
    assert_eq!(manifest["seeds"]["seed"], 3);
    assert_eq!(manifest["resolved"]["generator"]["vocab"], 16);
}

#[test]
fn missing_generator_field_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gen_config();
    cfg.as_object_mut().unwrap().remove("vocab");
    let p = dir.path().join("gen.json");
    fs::write(&p, cfg.to_string()).unwrap();
    let out = longer(&["gen", "--config", s(&p), "--out", s(&dir.path().join("d.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab"));
}

#[test]
fn zero_users_gives_empty_file_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    ok(&["gen", "--n-users", "0", "--out", s(&p)]);
    assert_eq!(fs::read(&p).unwrap().len(), 0);
    assert!(dir.path().join("empty.jsonl.manifest.json").exists());
}

#[test]
fn train_then_eval_reproduces_final_metrics() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.model_cfg), "--data", s(&f.data), "--out", s(&run)]);
    for file in ["checkpoint.bin", "train.csv", "config.json", "metrics.json", "manifest.json"] {
        assert!(run.join(file).exists(), "{} missing", file);
    }
    let metrics = read_json(&run.join("metrics.json"));
    let ev = f.root.join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&f.data),
        "--config",
        s(&run.join("config.json")),
        "--baseline",
        "sumpooling",
        "--out",
        s(&ev),
    ]);
    let result = read_json(&ev.join("eval.json"));
    assert_eq!(result["model"]["auc"], metrics["auc"]);
    assert_eq!(result["model"]["logloss"], metrics["logloss"]);
    assert_eq!(result["held_out"], metrics["held_out"]);
    assert_eq!(result["baseline"]["name"], "sumpooling");
    assert!(result["baseline"]["logloss"].is_number());
}

#[test]
fn eval_with_mismatched_config_exits_4() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.model_cfg), "--epochs", "1", "--data", s(&f.data), "--out", s(&run)]);
    let mut other = model_config();
    other["head_hidden"] = json!(6);
    let p = f.root.join("other.json");
    fs::write(&p, other.to_string()).unwrap();
    let out = longer(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&f.data),
        "--config",
        s(&p),
        "--out",
        s(&f.root.join("ev")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn query_strategy_override_is_recorded() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&[
        "train",
        "--config",
        s(&f.model_cfg),
        "--epochs",
        "1",
        "--query-strategy",
        "uniform3",
        "--data",
        s(&f.data),
        "--out",
        s(&run),
    ]);
    let cfg = read_json(&run.join("config.json"));
    assert_eq!(cfg["queries"], 3);
    assert_eq!(cfg["train"]["epochs"], 1);
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["resolved"]["model"], cfg);
    assert!(manifest["args"].as_array().unwrap().iter().any(|a| a == "uniform3"));
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let bad = longer(&["train", "--query-strategy", "sideways4", "--data", s(&f.data), "--out", s(&run)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bench_writes_csv_and_no_cache_matches_naive() {
    let f = fixture();
    let csv = f.root.join("bench.csv");
    let stdout = ok(&[
        "bench", "--config", s(&f.model_cfg), "--users", "2", "--candidates", "5",
        "--repetitions", "1", "--out", s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(longer::serving::BENCH_CSV_HEADER));
    assert!(lines.count() >= 1);
    assert!(stdout.contains("C="));
    assert!(f.root.join("bench.csv.manifest.json").exists());

    let nc = f.root.join("nc.csv");
    ok(&[
        "bench", "--config", s(&f.model_cfg), "--users", "2", "--candidates", "5",
        "--repetitions", "1", "--no-cache", "--out", s(&nc),
    ]);
    let text = fs::read_to_string(&nc).unwrap();
    for row in text.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[2], cols[3], "no-cache mul-adds differ: {}", row);
    }

    let too_many = longer(&["bench", "--config", s(&f.model_cfg), "--users", "50", "--out", s(&nc)]);
    assert_eq!(too_many.status.code(), Some(2));
}

#[test]
fn cost_prints_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cost.json");
    let stdout = ok(&["cost", "--out", s(&out)]);
    assert!(stdout.contains("587202560"), "{}", stdout);
    assert!(stdout.contains("335544320"), "{}", stdout);
    let json = read_json(&out);
    assert_eq!(json["flops_vanilla"], "587202560");

    let cfg = dir.path().join("model.json");
    fs::write(&cfg, model_config().to_string()).unwrap();
    ok(&["cost", "--config", s(&cfg), "--out", s(&out)]);
    let json = read_json(&out);
    assert!(json["params"]["total"].as_u64().unwrap() > 0);
    assert!(json["serving"]["per_candidate"].as_u64().unwrap() > 0);

    let bad = longer(&["cost", "--merge", "0"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn fit_recovers_exact_power_law() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pts.csv");
    let mut text = String::from("x,y\n");
    for x in [1.0f64, 2.0, 4.0, 8.0, 16.0, 32.0] {
        text += &format!("{},{}\n", x, 2.0 * x.powf(0.5) + 1.0);
    }
    fs::write(&input, text).unwrap();
    let out = dir.path().join("fit.json");
    ok(&["fit", "--input", s(&input), "--out", s(&out)]);
    let fit = read_json(&out);
    assert!((fit["alpha"].as_f64().unwrap() - 2.0).abs() < 1e-3);
    assert!((fit["beta"].as_f64().unwrap() - 0.5).abs() < 1e-3);
    assert!((fit["gamma"].as_f64().unwrap() - 1.0).abs() < 1e-3);

    fs::write(&input, "x,y\n1,2\n2,3\n").unwrap();
    assert_ne!(longer(&["fit", "--input", s(&input)]).status.code(), Some(0));
}

#[test]
fn three_point_sweep_emits_points_without_fit() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = model_config();
    model["train"]["epochs"] = json!(1);
    let cfg = json!({
        "generator": gen_config(),
        "data_seed": 1,
        "model": model,
        "axis": "seq_len",
        "values": [8, 16, 32]
    });
    let p = dir.path().join("sweep.json");
    fs::write(&p, cfg.to_string()).unwrap();
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&p), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let fit = read_json(&out.join("fit.json"));
    assert!(fit["fit"].is_null());
    assert!(fit["note"].as_str().unwrap().contains("need 4"));
}

#[test]
fn score_preserves_candidate_order() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.model_cfg), "--epochs", "1", "--data", s(&f.data), "--out", s(&run)]);
    let requests = f.root.join("req.jsonl");
    let req = |uid: u32, items: &[u32]| {
        let cands: Vec<Value> = items
            .iter()
            .map(|&i| json!({ "item_id": i, "timestamp": 9_000_000_000i64 }))
            .collect();
        json!({ "user_id": uid, "candidates": cands }).to_string()
    };
    fs::write(&requests, format!("{}\n{}\n", req(1, &[3, 5, 7]), req(2, &[7, 5, 3]))).unwrap();
    let out = f.root.join("scores.jsonl");
    ok(&[
        "score",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--history",
        s(&f.data),
        "--requests",
        s(&requests),
        "--out",
        s(&out),
    ]);
    let lines: Vec<Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["user_id"], 1);
    let p = |v: &Value, i: usize| v["probabilities"][i].as_f64().unwrap();
    assert_eq!(lines[0]["probabilities"].as_array().unwrap().len(), 3);
    for i in 0..3 {
        assert!(p(&lines[0], i) > 0.0 && p(&lines[0], i) < 1.0);
    }
}
