//! Token encoding.
//!
//! Sequence token for the event in slot `s`:
//!
//! ```text
//! concat(item_emb, action_emb, time_emb[bucket(ref_ts − ts)]) · W_in + b_in
//!   + abs_pos_emb[recency]  →  MLP(d → 2d → d)
//! ```
//!
//! `recency` is 0 for the most recent event. Events are right-aligned in
//! the padded window so the most recent event sits in the last slot; pad
//! slots are zero rows.
//!
//! Global tokens, in rank order `[UID, CLS…, target]`, are lifted to the
//! model width `D` and passed through a shared `MLP(D → 2D → D)`. The UID
//! row lifts the `d`-wide uid embedding, CLS rows are learned `D`-wide
//! vectors, and the target row lifts
//! `concat(item_emb[candidate], time_emb[bucket(candidate_ts − last_ts)])`.

use rand::Rng;

use super::{time_bucket, Candidate, Event, Sample, UserFeatures};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensors::{Linear, Mlp, NodeId, ParamId, ParamStore, Tape};

/// Number of log-2 time-difference buckets (bucket 0 means "no event").
pub const TIME_BUCKETS: usize = 32;

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub action: ParamId,
    pub time: ParamId,
    pub uid: Option<ParamId>,
    pub abs_pos: ParamId,
    pub cls: ParamId,
    pub profile: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct InputParams {
    pub tables: EmbeddingTables,
    pub seq_proj: Linear,
    pub seq_mlp: Mlp,
    pub uid_lift: Option<Linear>,
    pub target_lift: Linear,
    pub global_mlp: Mlp,
}

impl InputParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.item_dim;
        let dm = cfg.model_width();
        let s = cfg.init_std;
        let tables = EmbeddingTables {
            item: store.normal("emb.item", &[cfg.n_items, cfg.item_emb_dim], s, rng),
            action: store.normal("emb.action", &[cfg.n_actions, cfg.action_emb_dim], s, rng),
            time: store.normal("emb.time", &[TIME_BUCKETS, cfg.time_emb_dim], s, rng),
            uid: cfg
                .has_uid_token()
                .then(|| store.normal("emb.uid", &[cfg.n_users, d], s, rng)),
            abs_pos: store.normal("emb.abs_pos", &[cfg.padded_len(), d], s, rng),
            cls: store.normal("emb.cls", &[cfg.cls_tokens(), dm], s, rng),
            profile: cfg
                .profile_in_head
                .then(|| store.normal("emb.profile", &[cfg.n_profiles, d], s, rng)),
        };
        let raw = cfg.item_emb_dim + cfg.action_emb_dim + cfg.time_emb_dim;
        InputParams {
            tables,
            seq_proj: Linear::new(store, "input.seq_proj", raw, d, rng),
            seq_mlp: Mlp::new(store, "input.seq_mlp", d, 2 * d, d, rng),
            uid_lift: cfg
                .has_uid_token()
                .then(|| Linear::new(store, "input.uid_lift", d, dm, rng)),
            target_lift: Linear::new(
                store,
                "input.target_lift",
                cfg.item_emb_dim + cfg.time_emb_dim,
                dm,
                rng,
            ),
            global_mlp: Mlp::new(store, "input.global_mlp", dm, 2 * dm, dm, rng),
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let d = cfg.item_dim;
        let dm = cfg.model_width();
        let mut n = cfg.n_items * cfg.item_emb_dim
            + cfg.n_actions * cfg.action_emb_dim
            + TIME_BUCKETS * cfg.time_emb_dim
            + cfg.padded_len() * d
            + cfg.cls_tokens() * dm;
        if cfg.has_uid_token() {
            n += cfg.n_users * d + Linear::param_count(d, dm);
        }
        if cfg.profile_in_head {
            n += cfg.n_profiles * d;
        }
        let raw = cfg.item_emb_dim + cfg.action_emb_dim + cfg.time_emb_dim;
        n + Linear::param_count(raw, d)
            + Mlp::param_count(d, 2 * d, d)
            + Linear::param_count(cfg.item_emb_dim + cfg.time_emb_dim, dm)
            + Mlp::param_count(dm, 2 * dm, dm)
    }
}

/// Sequence tokens before merging.
#[derive(Debug, Clone)]
pub struct InputBundle {
    /// `padded_len × d`, oldest slot first.
    pub tokens: NodeId,
    /// True for pad slots.
    pub pad_mask: Vec<bool>,
    pub seq_len_actual: usize,
    /// Timestamp of the most recent visible event.
    pub last_ts: Option<i64>,
}

/// Global-token layout: rank order `[UID?, CLS × n, target]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalLayout {
    pub has_uid: bool,
    pub cls: usize,
}

impl GlobalLayout {
    pub fn of(cfg: &ModelConfig) -> Self {
        GlobalLayout {
            has_uid: cfg.has_uid_token(),
            cls: cfg.cls_tokens(),
        }
    }

    pub fn len(&self) -> usize {
        usize::from(self.has_uid) + self.cls + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first_cls(&self) -> usize {
        usize::from(self.has_uid)
    }

    pub fn target(&self) -> usize {
        self.len() - 1
    }
}

fn check(table: &'static str, id: u32, size: usize) -> Result<usize> {
    if (id as usize) < size {
        Ok(id as usize)
    } else {
        Err(Error::Lookup {
            table,
            id: id as u64,
            size,
        })
    }
}

/// Visible events: timestamp at or before `reference_ts`, most recent
/// `seq_len` of them.
pub(crate) fn visible_events(events: &[Event], reference_ts: i64, seq_len: usize) -> &[Event] {
    let end = events.partition_point(|e| e.timestamp <= reference_ts);
    &events[end.saturating_sub(seq_len)..end]
}

/// Encodes the behavior sequence relative to `reference_ts` (the
/// candidate timestamp in training, the request time in serving).
pub fn encode_sequence(
    tape: &mut Tape,
    events: &[Event],
    reference_ts: i64,
    params: &InputParams,
    cfg: &ModelConfig,
) -> Result<InputBundle> {
    let lp = cfg.padded_len();
    let visible = visible_events(events, reference_ts, cfg.seq_len);
    let pad = lp - visible.len();

    let mut items = vec![None; lp];
    let mut actions = vec![None; lp];
    let mut buckets = vec![None; lp];
    for (i, e) in visible.iter().enumerate() {
        let slot = pad + i;
        items[slot] = Some(check("item", e.item_id, cfg.n_items)?);
        actions[slot] = Some(check("action", e.action_type, cfg.n_actions)?);
        buckets[slot] = Some(time_bucket(reference_ts - e.timestamp));
    }
    let pad_mask: Vec<bool> = (0..lp).map(|s| s < pad).collect();

    let t = &params.tables;
    let pos_rows = tape.params().get(t.abs_pos).rows();
    if pos_rows < lp {
        return Err(Error::dim(
            "encode_sequence",
            format!("positional table has {} rows, need {}", pos_rows, lp),
        ));
    }
    let e_item = tape.embed(t.item, items)?;
    let e_act = tape.embed(t.action, actions)?;
    let e_time = tape.embed(t.time, buckets)?;
    let raw = tape.concat_cols(&[e_item, e_act, e_time])?;
    let proj = params.seq_proj.forward(tape, raw)?;
    let pos = tape.embed(t.abs_pos, (0..lp).map(|s| Some(lp - 1 - s)).collect())?;
    let x = tape.add(proj, pos)?;
    let h = params.seq_mlp.forward(tape, x)?;
    let tokens = tape.mask_rows(h, pad_mask.iter().map(|p| !p).collect())?;

    Ok(InputBundle {
        tokens,
        pad_mask,
        seq_len_actual: visible.len(),
        last_ts: visible.last().map(|e| e.timestamp),
    })
}

/// Candidate-independent global rows `[UID?, CLS…]`, `(m−1) × D`.
pub(crate) fn user_global_rows(
    tape: &mut Tape,
    user: &UserFeatures,
    params: &InputParams,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let mut rows = Vec::new();
    if let (Some(table), Some(lift)) = (params.tables.uid, params.uid_lift) {
        let uid = check("uid", user.uid, cfg.n_users)?;
        let e = tape.embed(table, vec![Some(uid)])?;
        rows.push(lift.forward(tape, e)?);
    }
    rows.push(tape.param(params.tables.cls));
    let lifted = tape.concat_rows(&rows)?;
    params.global_mlp.forward(tape, lifted)
}

/// Target global row, `1 × D`.
pub(crate) fn target_global_row(
    tape: &mut Tape,
    candidate: &Candidate,
    last_ts: Option<i64>,
    params: &InputParams,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let item = check("item", candidate.item_id, cfg.n_items)?;
    let bucket = last_ts.map_or(0, |ts| time_bucket(candidate.timestamp - ts));
    let e_item = tape.embed(params.tables.item, vec![Some(item)])?;
    let e_time = tape.embed(params.tables.time, vec![Some(bucket)])?;
    let raw = tape.concat_cols(&[e_item, e_time])?;
    let lifted = params.target_lift.forward(tape, raw)?;
    params.global_mlp.forward(tape, lifted)
}

/// All `m` global rows in rank order, `m × D`.
pub fn assemble_global_tokens(
    tape: &mut Tape,
    sample: &Sample,
    params: &InputParams,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let visible = visible_events(&sample.events, sample.candidate.timestamp, cfg.seq_len);
    let user = user_global_rows(tape, &sample.user_features, params, cfg)?;
    let target = target_global_row(
        tape,
        &sample.candidate,
        visible.last().map(|e| e.timestamp),
        params,
        cfg,
    )?;
    tape.concat_rows(&[user, target])
}
