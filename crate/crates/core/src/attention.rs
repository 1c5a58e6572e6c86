//! Visibility masks and the cross-causal / self-causal attention blocks.
//!
//! Token order everywhere is sequence first, globals last. The rule for a
//! (query, key) pair:
//!
//! * a pad key is never visible, and a pad query sees nothing;
//! * a sequence query at position `p` sees sequence keys at positions
//!   `<= p` and no global key;
//! * a global query of rank `r` sees every sequence key and the global
//!   keys of rank `<= r`.
//!
//! Blocks are pre-LN: `x + MHA(LN1(x_q), LN1(x_kv))`, then
//! `h + FFN(LN2(h))` with an FFN hidden width of `4D`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensors::{Linear, Mlp, NodeId, ParamId, ParamStore, Tape, Tensor, MASK_NEG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Sequence,
    Global { rank: usize },
}

/// Per-token label used to build masks. `position` is the chronological
/// index for sequence tokens and unused otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub kind: TokenKind,
    pub position: usize,
}

impl TokenMeta {
    pub fn pad(position: usize) -> Self {
        TokenMeta {
            kind: TokenKind::Pad,
            position,
        }
    }

    pub fn seq(position: usize) -> Self {
        TokenMeta {
            kind: TokenKind::Sequence,
            position,
        }
    }

    pub fn global(rank: usize) -> Self {
        TokenMeta {
            kind: TokenKind::Global { rank },
            position: rank,
        }
    }

    pub fn is_pad(&self) -> bool {
        self.kind == TokenKind::Pad
    }

    pub fn is_global(&self) -> bool {
        matches!(self.kind, TokenKind::Global { .. })
    }
}

pub fn visible(query: &TokenMeta, key: &TokenMeta) -> bool {
    match (query.kind, key.kind) {
        (TokenKind::Pad, _) | (_, TokenKind::Pad) => false,
        (TokenKind::Sequence, TokenKind::Sequence) => key.position <= query.position,
        (TokenKind::Sequence, TokenKind::Global { .. }) => false,
        (TokenKind::Global { .. }, TokenKind::Sequence) => true,
        (TokenKind::Global { rank: q }, TokenKind::Global { rank: k }) => k <= q,
    }
}

/// Additive `q × v` mask with entries `0` (visible) or [`MASK_NEG`].
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    pub additive: Tensor,
    pub queries: Vec<TokenMeta>,
    pub keys: Vec<TokenMeta>,
}

impl VisibilityMask {
    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.additive.get(i, j) == 0.0
    }

    pub fn query_positions(&self) -> Vec<usize> {
        self.queries.iter().map(|t| t.position).collect()
    }

    pub fn key_positions(&self) -> Vec<usize> {
        self.keys.iter().map(|t| t.position).collect()
    }
}

pub fn build_mask(queries: &[TokenMeta], keys: &[TokenMeta]) -> VisibilityMask {
    let mut data = Vec::with_capacity(queries.len() * keys.len());
    for q in queries {
        for k in keys {
            data.push(if visible(q, k) { 0.0 } else { MASK_NEG });
        }
    }
    VisibilityMask {
        additive: Tensor::matrix(queries.len(), keys.len(), data).expect("mask shape"),
        queries: queries.to_vec(),
        keys: keys.to_vec(),
    }
}

/// Parameters of one attention block at width `D`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub width: usize,
    pub heads: usize,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn: Mlp,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionParams {
            width,
            heads,
            ln1_gain: store.ones(format!("{}.ln1.gain", name), &[width]),
            ln1_bias: store.zeros(format!("{}.ln1.bias", name), &[width]),
            wq: Linear::new(store, &format!("{}.wq", name), width, width, rng),
            wk: Linear::new(store, &format!("{}.wk", name), width, width, rng),
            wv: Linear::new(store, &format!("{}.wv", name), width, width, rng),
            wo: Linear::new(store, &format!("{}.wo", name), width, width, rng),
            ln2_gain: store.ones(format!("{}.ln2.gain", name), &[width]),
            ln2_bias: store.zeros(format!("{}.ln2.bias", name), &[width]),
            ffn: Mlp::new(store, &format!("{}.ffn", name), width, 4 * width, width, rng),
        }
    }

    /// `12D² + 13D`.
    pub fn param_count(width: usize) -> usize {
        12 * width * width + 13 * width
    }

    /// Forward mul-adds for `q` queries over `v` keys.
    pub fn mul_adds(width: usize, q: usize, v: usize) -> u64 {
        let (d, q, v) = (width as u64, q as u64, v as u64);
        10 * q * d * d + 2 * v * d * d + 2 * q * v * d
    }

    fn check(&self, tape: &Tape, x: NodeId) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("{} heads do not divide width {}", self.heads, self.width),
            ));
        }
        let c = tape.value(x).cols();
        if c != self.width {
            return Err(Error::dim(
                "attention",
                format!("input width {} vs block width {}", c, self.width),
            ));
        }
        Ok(())
    }
}

/// `LN1(x)·W_K` and `LN1(x)·W_V`.
pub fn project_kv(tape: &mut Tape, p: &AttentionParams, x: NodeId) -> Result<(NodeId, NodeId)> {
    p.check(tape, x)?;
    let ln = tape.layer_norm_params(x, p.ln1_gain, p.ln1_bias)?;
    let k = p.wk.forward(tape, ln)?;
    let v = p.wv.forward(tape, ln)?;
    Ok((k, v))
}

/// Multi-head `softmax(QKᵀ/√(D/h) + M)·V` on projected inputs, heads
/// concatenated, no output projection.
pub fn attention_core(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &Tensor,
    heads: usize,
) -> Result<NodeId> {
    let width = tape.value(q).cols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.masked_softmax(s, mask)?;
        outs.push(tape.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Residual FFN half of a block: `h + FFN(LN2(h))`.
pub(crate) fn ffn_half(tape: &mut Tape, p: &AttentionParams, h: NodeId) -> Result<NodeId> {
    let ln = tape.layer_norm_params(h, p.ln2_gain, p.ln2_bias)?;
    let f = p.ffn.forward(tape, ln)?;
    tape.add(h, f)
}

/// Attention of `x_q` over precomputed keys and values, then the FFN half.
pub fn attend(
    tape: &mut Tape,
    p: &AttentionParams,
    x_q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &Tensor,
) -> Result<NodeId> {
    p.check(tape, x_q)?;
    let (nq, nk) = (tape.value(x_q).rows(), tape.value(k).rows());
    if mask.dims2() != (nq, nk) {
        return Err(Error::dim(
            "attend",
            format!("mask {:?} for {} queries and {} keys", mask.shape(), nq, nk),
        ));
    }
    let ln = tape.layer_norm_params(x_q, p.ln1_gain, p.ln1_bias)?;
    let q = p.wq.forward(tape, ln)?;
    let a = attention_core(tape, q, k, v, mask, p.heads)?;
    let o = p.wo.forward(tape, a)?;
    let h = tape.add(x_q, o)?;
    ffn_half(tape, p, h)
}

/// First layer: composite queries `o` over the full key source `r`.
pub fn cross_causal_block(
    tape: &mut Tape,
    p: &AttentionParams,
    o: NodeId,
    r: NodeId,
    mask: &VisibilityMask,
) -> Result<NodeId> {
    let (k, v) = project_kv(tape, p, r)?;
    attend(tape, p, o, k, v, &mask.additive)
}

pub fn self_causal_block(
    tape: &mut Tape,
    p: &AttentionParams,
    x: NodeId,
    mask: &VisibilityMask,
) -> Result<NodeId> {
    cross_causal_block(tape, p, x, x, mask)
}
