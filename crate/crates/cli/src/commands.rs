use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use longer::analysis::{count_params, fit_power_law, serving_mul_adds, CostReport};
use longer::inputs::{
    generate_dataset, read_dataset, temporal_split, write_dataset, Event, GeneratorConfig, UserFeatures,
};
use longer::merge::MergeMode;
use longer::model::{
    evaluate, run_sweep, train as fit_model, LongerModel, ModelConfig, QueryStrategy, SumPooling, SweepAxis,
    TrainingReport,
};
use longer::serving::{bench_serving, score_request, BenchUser, ScoreRequest};
use longer::{Error, Result};
use serde::{Deserialize, Serialize};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::manifest::{beside, RunManifest};
use crate::ModelFlags;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {}", path.display(), e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn parse_merge_mode(s: &str) -> Result<MergeMode> {
    serde_json::from_value(json!(s))
        .map_err(|_| Error::Config(format!("unknown merge mode '{}' (concat, inner_trans)", s)))
}

fn apply_query_spec(cfg: &mut ModelConfig, spec: &str) -> Result<()> {
    let (strategy, k) = QueryStrategy::parse_spec(spec)?;
    cfg.query_strategy = strategy;
    cfg.queries = k;
    Ok(())
}

/// Built-in default, then the config file, then flags.
pub fn resolve_model_config(flags: &ModelFlags) -> Result<ModelConfig> {
    let mut cfg = match &flags.config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => ModelConfig::default(),
    };
    macro_rules! set {
        ($flag:ident => $($field:ident).+) => {
            if let Some(v) = flags.$flag.clone() {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(seq_len => seq_len);
    set!(item_dim => item_dim);
    set!(merge_factor => merge_factor);
    set!(self_layers => self_layers);
    set!(heads => heads);
    set!(init_seed => init_seed);
    set!(epochs => train.epochs);
    set!(lr => train.lr);
    set!(batch_size => train.batch_size);
    set!(train_seed => train.seed);
    set!(holdout => train.holdout);
    if let Some(m) = &flags.merge_mode {
        cfg.merge_mode = parse_merge_mode(m)?;
    }
    if let Some(q) = &flags.query_strategy {
        apply_query_spec(&mut cfg, q)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_manifest(m: &mut RunManifest, flags: &ModelFlags, cfg: &ModelConfig) {
    m.config_path(flags.config.as_deref());
    m.resolve("model", cfg);
    m.seed("init_seed", cfg.init_seed);
    m.seed("train_seed", cfg.train.seed);
}

pub fn gen(config: Option<&Path>, seed: u64, n_users: Option<usize>, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::new("gen");
    let mut cfg = match config {
        Some(p) => read_json::<GeneratorConfig>(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(n) = n_users {
        cfg.n_users = n;
    }
    manifest.config_path(config);
    manifest.resolve("generator", &cfg);
    manifest.seed("seed", seed);
    let data = manifest.time("generate", || generate_dataset(&cfg, seed))?;
    manifest.time("write", || write_dataset(out, &data))?;
    manifest.output(out);
    manifest.write(&beside(out))?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

/// Training report and final held-out metrics as written by `train`.
#[derive(Debug, Serialize, Deserialize)]
struct Metrics {
    auc: Option<f64>,
    logloss: Option<f64>,
    held_out: usize,
}

pub fn train(flags: &ModelFlags, data_path: &Path, out: &Path) -> Result<()> {
    let cfg = resolve_model_config(flags)?;
    let mut manifest = RunManifest::new("train");
    model_manifest(&mut manifest, flags, &cfg);
    manifest.input(data_path)?;
    let data = read_dataset(data_path)?;
    let (train_set, held_out) = temporal_split(&data, cfg.train.holdout);
    let mut model = LongerModel::new(cfg.clone())?;
    let report = manifest.time("train", || fit_model(&mut model, &train_set, &held_out, &cfg.train))?;

    fs::create_dir_all(out)?;
    manifest.output_dir = Some(out.display().to_string());
    let ckpt = out.join("checkpoint.bin");
    model.save(&ckpt)?;
    report.write_csv(&out.join("train.csv"))?;
    write_json(&out.join("config.json"), &cfg)?;
    let last = report.last();
    write_json(
        &out.join("metrics.json"),
        &Metrics {
            auc: last.and_then(|e| e.auc),
            logloss: last.and_then(|e| e.logloss),
            held_out: held_out.len(),
        },
    )?;
    for f in ["checkpoint.bin", "train.csv", "config.json", "metrics.json"] {
        manifest.output(&out.join(f));
    }
    manifest.write(&out.join("manifest.json"))?;
    print_report(&report);
    println!("params {} checkpoint {}", model.param_count(), ckpt.display());
    Ok(())
}

fn print_report(report: &TrainingReport) {
    let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.4}", v));
    for e in &report.epochs {
        println!("epoch {} loss {:.4} auc {} logloss {}", e.epoch, e.loss, f(e.auc), f(e.logloss));
    }
}

pub fn eval(
    checkpoint: &Path,
    data_path: &Path,
    config: Option<&Path>,
    baseline: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut manifest = RunManifest::new("eval");
    manifest.input(checkpoint)?;
    manifest.input(data_path)?;
    let model = LongerModel::load(checkpoint)?;
    if let Some(p) = config {
        let expected: ModelConfig = read_json(p)?;
        if expected != model.config {
            return Err(Error::Fingerprint {
                expected: expected.digest(),
                found: model.config.digest(),
            });
        }
        manifest.config_path(Some(p));
    }
    let cfg = model.config.clone();
    manifest.resolve("model", &cfg);
    manifest.seed("init_seed", cfg.init_seed);
    manifest.seed("train_seed", cfg.train.seed);
    let data = read_dataset(data_path)?;
    let (train_set, held_out) = temporal_split(&data, cfg.train.holdout);
    let (auc, logloss) = manifest.time("eval", || evaluate(&model, &held_out))?;
    let mut result = json!({
        "model": { "auc": auc, "logloss": logloss },
        "held_out": held_out.len(),
    });
    println!("longer auc {:?} logloss {:?} on {} held-out samples", auc, logloss, held_out.len());

    match baseline {
        None => {}
        Some("sumpooling") => {
            let mut b = SumPooling::new(cfg.clone())?;
            let report = manifest.time("baseline", || fit_model(&mut b, &train_set, &held_out, &cfg.train))?;
            let last = report.last();
            let (ba, bl) = (last.and_then(|e| e.auc), last.and_then(|e| e.logloss));
            println!("sumpooling auc {:?} logloss {:?}", ba, bl);
            result["baseline"] = json!({ "name": "sumpooling", "auc": ba, "logloss": bl });
            fs::create_dir_all(out)?;
            report.write_csv(&out.join("baseline_train.csv"))?;
            manifest.output(&out.join("baseline_train.csv"));
        }
        Some(other) => {
            return Err(Error::Config(format!("unknown baseline '{}' (sumpooling)", other)));
        }
    }
    fs::create_dir_all(out)?;
    manifest.output_dir = Some(out.display().to_string());
    write_json(&out.join("eval.json"), &result)?;
    manifest.output(&out.join("eval.json"));
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

pub struct BenchArgs {
    pub users: usize,
    pub candidates: usize,
    pub repetitions: usize,
    pub use_cache: bool,
    pub seed: u64,
}

/// Full-length synthetic histories matched to the model's vocabulary.
fn bench_users(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<BenchUser>> {
    if n > cfg.n_users {
        return Err(Error::Config(format!(
            "{} bench users but the model has {} uid rows",
            n, cfg.n_users
        )));
    }
    let n_interests = cfg.n_items.clamp(2, 16);
    let gen = GeneratorConfig {
        n_users: n,
        samples_per_user: 1,
        vocab: cfg.n_items.max(n_interests),
        n_interests,
        l_max: cfg.seq_len,
        min_events: cfg.seq_len,
        interests_per_user: 1,
        n_actions: cfg.n_actions,
        n_profiles: cfg.n_profiles,
        ..GeneratorConfig::default()
    };
    Ok(generate_dataset(&gen, seed)?
        .into_iter()
        .map(|s| BenchUser {
            events: s.events,
            user: s.user_features,
            request_ts: s.candidate.timestamp,
        })
        .collect())
}

pub fn bench(flags: &ModelFlags, checkpoint: Option<&Path>, args: BenchArgs, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::new("bench");
    let model = match checkpoint {
        Some(p) => {
            manifest.input(p)?;
            LongerModel::load(p)?
        }
        None => LongerModel::new(resolve_model_config(flags)?)?,
    };
    model_manifest(&mut manifest, flags, &model.config);
    manifest.seed("bench_seed", args.seed);
    manifest.resolve(
        "bench",
        &json!({
            "users": args.users,
            "candidates": args.candidates,
            "repetitions": args.repetitions,
            "use_cache": args.use_cache,
        }),
    );
    let users = bench_users(&model.config, args.users, args.seed)?;
    // one untimed pass so allocation warm-up does not land in the first row
    if args.repetitions > 0 {
        bench_serving(&model, &users[..users.len().min(1)], 1, 1, args.use_cache, args.seed)?;
    }
    let report = manifest.time("bench", || {
        bench_serving(&model, &users, args.candidates, args.repetitions, args.use_cache, args.seed)
    })?;
    fs::write(out, report.to_csv())?;
    manifest.output(out);
    manifest.write(&beside(out))?;

    for r in &report.rows {
        println!(
            "C={} cached/naive mul-adds {:.4} (analytic {:.4}) wall {:.3} max|dp| {:.2e}",
            r.candidates,
            r.cached_muladds as f64 / r.naive_muladds.max(1) as f64,
            r.analytic_cached as f64 / r.analytic_naive.max(1) as f64,
            r.cached_ns as f64 / r.naive_ns.max(1) as f64,
            r.max_abs_diff
        );
    }
    if let Some(r) = report.rows.iter().find(|r| !r.matches_analytic()) {
        return Err(Error::Numerical(format!(
            "counted mul-adds ({}, {}) differ from analytic ({}, {})",
            r.naive_muladds, r.cached_muladds, r.analytic_naive, r.analytic_cached
        )));
    }
    Ok(())
}

pub fn cost(
    seq_len: u64,
    dim: u64,
    merge: u64,
    inner_layers: u64,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let report = CostReport::new(seq_len, dim, merge, inner_layers)?;
    print!("{}", report.to_table());
    let mut value: serde_json::Value = serde_json::from_str(&report.to_json())?;
    if let Some(p) = config {
        let cfg: ModelConfig = read_json(p)?;
        cfg.validate()?;
        let params = count_params(&cfg);
        let serving = serving_mul_adds(&cfg);
        println!("params total         {}", params.total);
        println!("forward mul-adds     {}", serving.full_forward);
        println!("per-candidate        {}", serving.per_candidate);
        value = json!({ "cost": value, "params": params, "serving": serving });
    }
    if let Some(out) = out {
        let mut manifest = RunManifest::new("cost");
        manifest.config_path(config);
        manifest.resolve("cost", &json!({
            "seq_len": seq_len, "dim": dim, "merge": merge, "inner_layers": inner_layers
        }));
        write_json(out, &value)?;
        manifest.output(out);
        manifest.write(&beside(out))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct Point {
    x: f64,
    y: f64,
}

pub fn fit(input: &Path, out: Option<&Path>) -> Result<()> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| Error::Schema(format!("{}: {}", input.display(), e)))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in reader.deserialize::<Point>() {
        let p = row.map_err(|e| Error::Schema(format!("{}: {}", input.display(), e)))?;
        xs.push(p.x);
        ys.push(p.y);
    }
    let result = fit_power_law(&xs, &ys)?;
    let text = serde_json::to_string_pretty(&result)?;
    println!("{}", text);
    if let Some(out) = out {
        let mut manifest = RunManifest::new("fit");
        manifest.input(input)?;
        fs::write(out, text + "\n")?;
        manifest.output(out);
        manifest.write(&beside(out))?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    generator: GeneratorConfig,
    data_seed: u64,
    #[serde(default)]
    model: ModelConfig,
    axis: String,
    values: Vec<usize>,
}

pub fn sweep(config: &Path, query_strategy: Option<&str>, out: &Path) -> Result<()> {
    let mut sc: SweepConfig = read_json(config)?;
    if let Some(q) = query_strategy {
        apply_query_spec(&mut sc.model, q)?;
    }
    let axis = SweepAxis::parse(&sc.axis)?;
    sc.model.validate()?;
    let mut manifest = RunManifest::new("sweep");
    manifest.config_path(Some(config));
    manifest.resolve("sweep", &sc);
    manifest.seed("data_seed", sc.data_seed);
    manifest.seed("init_seed", sc.model.init_seed);
    manifest.seed("train_seed", sc.model.train.seed);

    let data = manifest.time("generate", || generate_dataset(&sc.generator, sc.data_seed))?;
    let (train_set, held_out) = temporal_split(&data, sc.model.train.holdout);
    let report = manifest.time("sweep", || run_sweep(&train_set, &held_out, &sc.model, axis, &sc.values));

    fs::create_dir_all(out)?;
    manifest.output_dir = Some(out.display().to_string());
    fs::write(out.join("sweep.csv"), report.to_csv())?;
    write_json(
        &out.join("fit.json"),
        &json!({ "axis": axis, "fit": report.fit, "note": report.fit_note }),
    )?;
    manifest.output(&out.join("sweep.csv"));
    manifest.output(&out.join("fit.json"));
    manifest.write(&out.join("manifest.json"))?;

    for p in &report.points {
        match &p.error {
            None => println!("{} = {}: auc {:?} logloss {:?} ({:.1}s)", axis.name(), p.value, p.auc, p.logloss, p.seconds),
            Some(e) => println!("{} = {}: failed: {}", axis.name(), p.value, e),
        }
    }
    match (&report.fit, &report.fit_note) {
        (Some(f), _) => println!(
            "fit: auc = {:.4}·x^{:.4} + {:.4}, r² {:.4}",
            f.alpha, f.beta, f.gamma, f.r_squared
        ),
        (None, Some(n)) => println!("no fit: {}", n),
        (None, None) => {}
    }
    Ok(())
}

pub fn score(checkpoint: &Path, history: &Path, requests: &Path, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::new("score");
    manifest.input(checkpoint)?;
    manifest.input(history)?;
    manifest.input(requests)?;
    let model = LongerModel::load(checkpoint)?;
    manifest.resolve("model", &model.config);

    // most recent sample per user
    let mut users: BTreeMap<u32, (i64, Vec<Event>, UserFeatures)> = BTreeMap::new();
    for s in read_dataset(history)? {
        let uid = s.user_features.uid;
        let newer = users.get(&uid).is_none_or(|(ts, _, _)| s.candidate.timestamp > *ts);
        if newer {
            users.insert(uid, (s.candidate.timestamp, s.events, s.user_features));
        }
    }

    let reader = BufReader::new(fs::File::open(requests)?);
    let mut w = BufWriter::new(fs::File::create(out)?);
    let mut n = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: ScoreRequest = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {}", requests.display(), i + 1, e)))?;
        // users without history are scored on an empty sequence
        let cold = UserFeatures {
            uid: req.user_id,
            profile_bucket: 0,
        };
        let (events, user) = match users.get(&req.user_id) {
            Some((_, e, u)) => (e.as_slice(), *u),
            None => (&[][..], cold),
        };
        let resp = score_request(&model, events, &user, &req)?;
        serde_json::to_writer(&mut w, &resp)?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    manifest.output(out);
    manifest.write(&beside(out))?;
    println!("scored {} requests into {}", n, out.display());
    Ok(())
}
