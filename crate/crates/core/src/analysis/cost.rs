//! Exact per-layer FLOP and parameter algebra.
//!
//! FLOPs follow the forward-only convention for a block at sequence
//! length `L` and width `d`: `24Ld²` for the Q/K/V/O projections and the
//! `4d` FFN, plus `4L²d` for the score and value products. One mul-add is
//! two FLOPs, so the tape's [`OpCounter`](crate::tensors::OpCounter)
//! counts half these numbers.

use num_rational::Ratio;
use serde::Serialize;

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::inputs::TIME_BUCKETS;
use crate::merge::{InnerTransParams, MergeMode};
use crate::model::{ModelConfig, QueryStrategy};

fn mul(a: u128, b: u128) -> Result<u128> {
    a.checked_mul(b).ok_or(Error::Overflow("cost arithmetic"))
}

fn add(a: u128, b: u128) -> Result<u128> {
    a.checked_add(b).ok_or(Error::Overflow("cost arithmetic"))
}

fn prod(xs: &[u128]) -> Result<u128> {
    xs.iter().try_fold(1u128, |acc, &x| mul(acc, x))
}

/// `24Ld² + 4L²d`.
pub fn flops_vanilla(l: u64, d: u64) -> Result<u128> {
    let (l, d) = (l as u128, d as u128);
    add(prod(&[24, l, d, d])?, prod(&[4, l, l, d])?)
}

/// `24LKd² + 4L²d/K`, exact as a rational.
pub fn flops_merged(l: u64, d: u64, k: u64) -> Result<Ratio<u128>> {
    if k == 0 {
        return Err(Error::Config("merge factor must be positive".into()));
    }
    let (l, d, k) = (l as u128, d as u128, k as u128);
    let linear = prod(&[24, l, k, d, d])?;
    let quad = prod(&[4, l, l, d])?;
    Ok(Ratio::from_integer(linear) + Ratio::new(quad, k))
}

/// `layers · (L/K) · (24Kd² + 4K²d)` = `layers · (24Ld² + 4LKd)`.
pub fn flops_inner_trans(l: u64, d: u64, k: u64, layers: u64) -> Result<u128> {
    let (l, d, k, n) = (l as u128, d as u128, k as u128, layers as u128);
    mul(n, add(prod(&[24, l, d, d])?, prod(&[4, l, k, d])?)?)
}

/// Exact cost figures for one `(L, d, K)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub l: u64,
    pub d: u64,
    pub k: u64,
    pub inner_layers: u64,
    pub flops_vanilla: u128,
    pub flops_merged: Ratio<u128>,
    pub flops_inner_trans: u128,
    /// `1 − flops_merged / flops_vanilla`.
    pub reduction_ratio: Ratio<u128>,
    pub params_per_block: u128,
    pub params_merged_block: u128,
}

#[derive(Serialize)]
struct CostReportJson {
    l: u64,
    d: u64,
    k: u64,
    inner_layers: u64,
    flops_vanilla: String,
    flops_merged: String,
    flops_inner_trans: String,
    reduction_ratio: String,
    reduction_percent: f64,
    params_per_block: String,
    params_merged_block: String,
}

fn ratio_str(r: &Ratio<u128>) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn ratio_f64(r: &Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl CostReport {
    pub fn new(l: u64, d: u64, k: u64, inner_layers: u64) -> Result<Self> {
        if l == 0 || d == 0 {
            return Err(Error::Config("L and d must be positive".into()));
        }
        let vanilla = flops_vanilla(l, d)?;
        let merged = flops_merged(l, d, k)?;
        let one = Ratio::from_integer(1u128);
        let frac = merged / Ratio::from_integer(vanilla);
        let reduction = if frac <= one { one - frac } else { Ratio::from_integer(0) };
        let (dd, kk) = (d as u128, k as u128);
        Ok(CostReport {
            l,
            d,
            k,
            inner_layers,
            flops_vanilla: vanilla,
            flops_merged: merged,
            flops_inner_trans: flops_inner_trans(l, d, k, inner_layers)?,
            reduction_ratio: reduction,
            params_per_block: add(prod(&[12, dd, dd])?, prod(&[13, dd])?)?,
            params_merged_block: add(prod(&[12, kk, kk, dd, dd])?, prod(&[13, kk, dd])?)?,
        })
    }

    pub fn reduction_percent(&self) -> f64 {
        100.0 * ratio_f64(&self.reduction_ratio)
    }

    pub fn to_json(&self) -> String {
        let j = CostReportJson {
            l: self.l,
            d: self.d,
            k: self.k,
            inner_layers: self.inner_layers,
            flops_vanilla: self.flops_vanilla.to_string(),
            flops_merged: ratio_str(&self.flops_merged),
            flops_inner_trans: self.flops_inner_trans.to_string(),
            reduction_ratio: ratio_str(&self.reduction_ratio),
            reduction_percent: self.reduction_percent(),
            params_per_block: self.params_per_block.to_string(),
            params_merged_block: self.params_merged_block.to_string(),
        };
        serde_json::to_string_pretty(&j).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("L", self.l.to_string()),
            ("d", self.d.to_string()),
            ("K", self.k.to_string()),
            ("flops_vanilla", self.flops_vanilla.to_string()),
            ("flops_merged", ratio_str(&self.flops_merged)),
            (
                "flops_inner_trans",
                format!("{} ({} layers)", self.flops_inner_trans, self.inner_layers),
            ),
            (
                "reduction",
                format!("{} = {:.3}%", ratio_str(&self.reduction_ratio), self.reduction_percent()),
            ),
            ("params_per_block", self.params_per_block.to_string()),
            ("params_merged_block", self.params_merged_block.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{:<20} {}\n", k, v)).collect()
    }
}

/// Itemized parameter count of a [`crate::model::LongerModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub embeddings: usize,
    pub input_mlp: usize,
    pub inner_trans: usize,
    pub query_bank: usize,
    pub per_block: usize,
    pub blocks: usize,
    pub head: usize,
    pub total: usize,
}

pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.item_dim;
    let dm = cfg.model_width();
    let lin = |i: usize, o: usize| i * o + o;
    let uid = cfg.has_uid_token();
    let embeddings = cfg.n_items * cfg.item_emb_dim
        + cfg.n_actions * cfg.action_emb_dim
        + TIME_BUCKETS * cfg.time_emb_dim
        + if uid { cfg.n_users * d } else { 0 }
        + cfg.padded_len() * d
        + cfg.cls_tokens() * dm
        + if cfg.profile_in_head { cfg.n_profiles * d } else { 0 };
    let raw = cfg.item_emb_dim + cfg.action_emb_dim + cfg.time_emb_dim;
    let input_mlp = lin(raw, d)
        + lin(d, 2 * d)
        + lin(2 * d, d)
        + if uid { lin(d, dm) } else { 0 }
        + lin(cfg.item_emb_dim + cfg.time_emb_dim, dm)
        + lin(dm, 2 * dm)
        + lin(2 * dm, dm);
    let inner_trans = if cfg.merge_mode == MergeMode::InnerTrans {
        InnerTransParams::param_count(d, cfg.inner_layers)
    } else {
        0
    };
    let query_bank = if cfg.query_strategy == QueryStrategy::LearnableK {
        cfg.queries * dm
    } else {
        0
    };
    let per_block = 12 * dm * dm + 13 * dm;
    let blocks = (1 + cfg.self_layers) * per_block;
    let head = 2 * dm + lin(cfg.head_input_width(), cfg.head_hidden) + lin(cfg.head_hidden, 1);
    ParamBreakdown {
        embeddings,
        input_mlp,
        inner_trans,
        query_bank,
        per_block,
        blocks,
        head,
        total: embeddings + input_mlp + inner_trans + query_bank + blocks + head,
    }
}

/// Analytic mul-adds of the serving paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ServingCost {
    pub full_forward: u64,
    pub cache_build: u64,
    pub per_candidate: u64,
}

impl ServingCost {
    /// `C` independent full forwards.
    pub fn naive(&self, c: u64) -> u64 {
        c * self.full_forward
    }

    /// One cache build plus `C` incremental scores.
    pub fn cached(&self, c: u64) -> u64 {
        self.cache_build + c * self.per_candidate
    }
}

/// Forward mul-adds of one full pass.
pub fn forward_mul_adds(cfg: &ModelConfig) -> u64 {
    serving_mul_adds(cfg).full_forward
}

pub fn serving_mul_adds(cfg: &ModelConfig) -> ServingCost {
    let u = |x: usize| x as u64;
    let d = u(cfg.item_dim);
    let dm = u(cfg.model_width());
    let lp = u(cfg.padded_len());
    let n = u(cfg.merged_len());
    let m = u(cfg.global_tokens);
    let k = u(cfg.queries);
    let raw = u(cfg.item_emb_dim + cfg.action_emb_dim + cfg.time_emb_dim);

    let seq_encode = lp * (raw * d + d * 2 * d + 2 * d * d);
    let uid = if cfg.has_uid_token() { d * dm } else { 0 };
    let global_mlp_row = 4 * dm * dm;
    let target_encode = u(cfg.item_emb_dim + cfg.time_emb_dim) * dm + global_mlp_row;
    let inner = if cfg.merge_mode == MergeMode::InnerTrans {
        InnerTransParams::mul_adds(cfg.item_dim, cfg.merge_factor, cfg.merged_len(), cfg.inner_layers)
    } else {
        0
    };
    let h = u(cfg.head_hidden);
    let head = u(cfg.head_input_width()) * h + h;
    let w = cfg.model_width();
    let layers = |q: u64, v: u64| {
        AttentionParams::mul_adds(w, q as usize, v as usize)
            + u(cfg.self_layers) * AttentionParams::mul_adds(w, q as usize, q as usize)
    };
    let (q, v) = (k + m, n + m);
    let full_forward = seq_encode + inner + uid + (m - 1) * global_mlp_row + target_encode + layers(q, v) + head;
    let cache_build = seq_encode + inner + uid + (m - 1) * global_mlp_row + layers(q - 1, v - 1);
    // one query row against v then q keys, its own K/V projections included
    let row = |keys: u64| 12 * dm * dm + 2 * keys * dm;
    let per_candidate = target_encode + row(v) + u(cfg.self_layers) * row(q) + head;
    ServingCost {
        full_forward,
        cache_build,
        per_candidate,
    }
}
