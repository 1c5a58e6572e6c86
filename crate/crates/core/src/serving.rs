//! Two-stage scoring with a per-user key/value cache.
//!
//! Stage one runs every candidate-independent row of the stack once per
//! `(user, request time)` and keeps each layer's keys, values and output
//! rows. Stage two pushes one target row per candidate through the layers,
//! attending over the cached keys plus its own.
//!
//! Sequence time features are measured from the request time, so a cache
//! only serves candidates stamped with that same time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{serving_mul_adds, ServingCost};
use crate::attention::{attend, build_mask, project_kv, TokenMeta};
use crate::error::{Error, Result};
use crate::inputs::encode::target_global_row;
use crate::inputs::{Candidate, Event, Sample, UserFeatures};
use crate::model::LongerModel;
use crate::rng::substream;
use crate::tensors::{sigmoid, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Keys over this layer's non-target key rows.
    pub keys: Tensor,
    pub values: Tensor,
    /// Layer output over the retained non-target rows.
    pub activations: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    pub uid: u32,
    pub request_ts: i64,
    pub fingerprint: u64,
    pub layers: Vec<LayerCache>,
    /// Labels of the first layer's non-target keys.
    pub first_keys: Vec<TokenMeta>,
    /// Labels of the retained non-target rows.
    pub retained: Vec<TokenMeta>,
    pub profile: Option<Tensor>,
    pub last_ts: Option<i64>,
    cls_row: usize,
}

impl KVCache {
    /// Floats held in keys, values, activations and the profile row.
    pub fn float_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.keys.len() + l.values.len() + l.activations.len())
            .sum::<usize>()
            + self.profile.as_ref().map_or(0, Tensor::len)
    }

    /// `2D·[(L/K + m − 1) + N·(k + m − 1)] + (N + 1)·(k + m − 1)·D`, plus
    /// `d` for the profile row.
    pub fn expected_float_count(cfg: &crate::model::ModelConfig) -> usize {
        let dm = cfg.model_width();
        let (n, m, k, layers) = (cfg.merged_len(), cfg.global_tokens, cfg.queries, cfg.self_layers);
        2 * dm * ((n + m - 1) + layers * (k + m - 1))
            + (layers + 1) * (k + m - 1) * dm
            + if cfg.profile_in_head { cfg.item_dim } else { 0 }
    }

    fn cls(&self) -> &[f64] {
        self.layers.last().expect("layers").activations.row(self.cls_row)
    }
}

/// Runs stage one for a user at `request_ts`.
pub fn build_cache(
    model: &LongerModel,
    events: &[Event],
    user: &UserFeatures,
    request_ts: i64,
) -> Result<KVCache> {
    let (cache, _) = build_cache_counted(model, events, user, request_ts)?;
    Ok(cache)
}

fn build_cache_counted(
    model: &LongerModel,
    events: &[Event],
    user: &UserFeatures,
    request_ts: i64,
) -> Result<(KVCache, u64)> {
    let mut tape = Tape::new(&model.store);
    let branch = model.user_branch(&mut tape, events, user, request_ts)?;
    let stack = model.run_stack(&mut tape, &branch, None)?;
    let layers = stack
        .kv
        .iter()
        .zip(&stack.outputs)
        .map(|((k, v), o)| LayerCache {
            keys: tape.value(*k).clone(),
            values: tape.value(*v).clone(),
            activations: tape.value(*o).clone(),
        })
        .collect();
    let gm = model.global_metas(false);
    let cache = KVCache {
        uid: user.uid,
        request_ts,
        fingerprint: model.fingerprint(),
        layers,
        first_keys: branch.merged_metas.iter().chain(&gm).copied().collect(),
        retained: branch.query_metas.iter().chain(&gm).copied().collect(),
        profile: branch.profile.map(|p| tape.value(p).clone()),
        last_ts: branch.last_ts,
        cls_row: model.cls_row_index(),
    };
    Ok((cache, tape.ops().mul_adds()))
}

/// Stage two for one candidate.
pub fn score_with_cache(model: &LongerModel, cache: &KVCache, candidate: &Candidate) -> Result<f64> {
    Ok(score_counted(model, cache, candidate)?.0)
}

fn score_counted(model: &LongerModel, cache: &KVCache, candidate: &Candidate) -> Result<(f64, u64)> {
    let found = model.fingerprint();
    if cache.fingerprint != found {
        return Err(Error::Fingerprint {
            expected: cache.fingerprint,
            found,
        });
    }
    if candidate.timestamp != cache.request_ts {
        return Err(Error::StaleCache(format!(
            "cache built for request time {}, candidate at {}",
            cache.request_ts, candidate.timestamp
        )));
    }
    let cfg = &model.config;
    let target_meta = [TokenMeta::global(cfg.global_tokens - 1)];
    let mut tape = Tape::new(&model.store);
    let mut x = target_global_row(&mut tape, candidate, cache.last_ts, &model.params.input, cfg)?;
    let blocks = std::iter::once(&model.params.cross).chain(&model.params.layers);
    for (i, (p, layer)) in blocks.zip(&cache.layers).enumerate() {
        let prior = if i == 0 { &cache.first_keys } else { &cache.retained };
        let keys: Vec<TokenMeta> = prior.iter().chain(&target_meta).copied().collect();
        let mask = build_mask(&target_meta, &keys);
        let (kt, vt) = project_kv(&mut tape, p, x)?;
        let kc = tape.leaf_ref(&layer.keys);
        let vc = tape.leaf_ref(&layer.values);
        let k = tape.concat_rows(&[kc, kt])?;
        let v = tape.concat_rows(&[vc, vt])?;
        x = attend(&mut tape, p, x, k, v, &mask.additive)?;
    }
    let cls = tape.leaf(Tensor::matrix(1, cfg.model_width(), cache.cls().to_vec())?);
    let profile = cache.profile.as_ref().map(|p| tape.leaf_ref(p));
    let (_, logit) = model.head_logit(&mut tape, x, cls, profile)?;
    let p = sigmoid(tape.value(logit).data()[0]);
    Ok((p, tape.ops().mul_adds()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub user_id: u32,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub user_id: u32,
    /// Same order as the request's candidates.
    pub probabilities: Vec<f64>,
    pub cache_build_ns: u64,
    pub per_candidate_ns: Vec<u64>,
}

/// Scores a request, building one cache per distinct candidate time.
pub fn score_request(
    model: &LongerModel,
    events: &[Event],
    user: &UserFeatures,
    request: &ScoreRequest,
) -> Result<ScoreResponse> {
    let mut caches = BTreeMap::new();
    let mut build_ns = 0u64;
    let mut probabilities = Vec::with_capacity(request.candidates.len());
    let mut per_candidate_ns = Vec::with_capacity(request.candidates.len());
    for c in &request.candidates {
        if !caches.contains_key(&c.timestamp) {
            let t = Instant::now();
            let cache = build_cache(model, events, user, c.timestamp)?;
            build_ns += t.elapsed().as_nanos() as u64;
            caches.insert(c.timestamp, cache);
        }
        let t = Instant::now();
        probabilities.push(score_with_cache(model, &caches[&c.timestamp], c)?);
        per_candidate_ns.push(t.elapsed().as_nanos() as u64);
    }
    Ok(ScoreResponse {
        user_id: request.user_id,
        probabilities,
        cache_build_ns: build_ns,
        per_candidate_ns,
    })
}

/// A user history to benchmark against, scored at `request_ts`.
#[derive(Debug, Clone)]
pub struct BenchUser {
    pub events: Vec<Event>,
    pub user: UserFeatures,
    pub request_ts: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config: String,
    pub candidates: usize,
    pub naive_muladds: u64,
    pub cached_muladds: u64,
    pub naive_ns: u64,
    pub cached_ns: u64,
    /// Analytic counts for the same run.
    pub analytic_naive: u64,
    pub analytic_cached: u64,
    /// Largest `|p_cached − p_full|` seen.
    pub max_abs_diff: f64,
}

impl BenchRow {
    pub fn matches_analytic(&self) -> bool {
        self.naive_muladds == self.analytic_naive && self.cached_muladds == self.analytic_cached
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str = "config,C,naive_muladds,cached_muladds,naive_ns,cached_ns";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", BENCH_CSV_HEADER);
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.config, r.candidates, r.naive_muladds, r.cached_muladds, r.naive_ns, r.cached_ns
            )
            .unwrap();
        }
        s
    }
}

/// Compares `C` full forwards per user against one cache build plus `C`
/// incremental scores. With `use_cache == false` both sides run the full
/// forward. Each repetition adds one row.
pub fn bench_serving(
    model: &LongerModel,
    users: &[BenchUser],
    candidates_per_user: usize,
    repetitions: usize,
    use_cache: bool,
    seed: u64,
) -> Result<BenchReport> {
    let cfg = &model.config;
    let cost: ServingCost = serving_mul_adds(cfg);
    let label = format!(
        "L{}_d{}_K{}_m{}_k{}_N{}",
        cfg.seq_len, cfg.item_dim, cfg.merge_factor, cfg.global_tokens, cfg.queries, cfg.self_layers
    );
    let mut report = BenchReport::default();
    for rep in 0..repetitions {
        let mut rng = substream(seed, &format!("bench/{}", rep));
        let mut row = BenchRow {
            config: label.clone(),
            candidates: candidates_per_user,
            naive_muladds: 0,
            cached_muladds: 0,
            naive_ns: 0,
            cached_ns: 0,
            analytic_naive: 0,
            analytic_cached: 0,
            max_abs_diff: 0.0,
        };
        for u in users {
            let cands: Vec<Candidate> = (0..candidates_per_user)
                .map(|_| Candidate {
                    item_id: rng.random_range(0..cfg.n_items as u32),
                    timestamp: u.request_ts,
                })
                .collect();
            let mut full = Vec::with_capacity(cands.len());
            let t = Instant::now();
            for c in &cands {
                let s = Sample {
                    events: u.events.clone(),
                    user_features: u.user,
                    candidate: *c,
                    label: 0,
                };
                let mut tape = Tape::new(&model.store);
                let z = model.logit_on(&mut tape, &s)?;
                full.push(sigmoid(tape.value(z).data()[0]));
                row.naive_muladds += tape.ops().mul_adds();
            }
            row.naive_ns += t.elapsed().as_nanos() as u64;
            row.analytic_naive += cost.naive(cands.len() as u64);

            let t = Instant::now();
            if use_cache {
                let (cache, ops) = build_cache_counted(model, &u.events, &u.user, u.request_ts)?;
                row.cached_muladds += ops;
                for (c, want) in cands.iter().zip(&full) {
                    let (p, ops) = score_counted(model, &cache, c)?;
                    row.cached_muladds += ops;
                    row.max_abs_diff = row.max_abs_diff.max((p - want).abs());
                }
                row.analytic_cached += cost.cached(cands.len() as u64);
            } else {
                for c in &cands {
                    let s = Sample {
                        events: u.events.clone(),
                        user_features: u.user,
                        candidate: *c,
                        label: 0,
                    };
                    row.cached_muladds += model.counted_mul_adds(&s)?;
                }
                row.analytic_cached += cost.naive(cands.len() as u64);
            }
            row.cached_ns += t.elapsed().as_nanos() as u64;
        }
        report.rows.push(row);
    }
    Ok(report)
}
