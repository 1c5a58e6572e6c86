//! The end-to-end model: encode, merge, select queries, one cross-causal
//! block over the merged sequence, `N` self-causal blocks over the
//! retained tokens, and the prediction head.

use super::{select_queries, ModelConfig, QueryStrategy};
use crate::attention::{attend, build_mask, project_kv, AttentionParams, TokenMeta};
use crate::error::{Error, Result};
use crate::inputs::{
    encode::{target_global_row, user_global_rows},
    encode_sequence, Event, GlobalLayout, InputParams, Sample, UserFeatures,
};
use crate::merge::{merge, merged_pad, InnerTransParams, MergeMode};
use crate::rng::substream;
use crate::tensors::{Mlp, NodeId, ParamId, ParamStore, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct LongerParams {
    pub input: InputParams,
    pub inner: Option<InnerTransParams>,
    pub query_bank: Option<ParamId>,
    pub cross: AttentionParams,
    pub layers: Vec<AttentionParams>,
    /// Normalization of the final rows fed to the head.
    pub final_ln_gain: ParamId,
    pub final_ln_bias: ParamId,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct LongerModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: LongerParams,
}

/// Candidate-independent part of one forward.
pub(crate) struct UserBranch {
    pub merged: NodeId,
    pub merged_metas: Vec<TokenMeta>,
    pub queries: NodeId,
    pub query_metas: Vec<TokenMeta>,
    /// `[UID?, CLS…]` rows, `(m−1) × D`.
    pub globals: NodeId,
    pub profile: Option<NodeId>,
    pub last_ts: Option<i64>,
    pub encoded: NodeId,
}

/// Nodes of one run through the attention stack.
pub(crate) struct StackNodes {
    /// Per-layer `(K, V)` over that layer's key rows.
    pub kv: Vec<(NodeId, NodeId)>,
    /// Per-layer outputs over the retained rows.
    pub outputs: Vec<NodeId>,
}

/// Values recorded by [`LongerModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub encoded: Tensor,
    pub merged: Tensor,
    pub query_metas: Vec<TokenMeta>,
    /// Outputs of the cross block then each self block, `(k+m) × D`.
    pub layers: Vec<Tensor>,
    pub head_input: Tensor,
    pub logit: f64,
    pub p: f64,
}

impl ForwardTrace {
    /// Every recorded row that does not belong to the target token.
    pub fn sequence_branch(&self) -> Vec<Tensor> {
        let mut out = vec![self.encoded.clone(), self.merged.clone()];
        for l in &self.layers {
            let rows = l.rows() - 1;
            out.push(Tensor::new(vec![rows, l.cols()], l.data()[..rows * l.cols()].to_vec()).expect("rows"));
        }
        out
    }
}

impl LongerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(config.init_seed, "model/init");
        let dm = config.model_width();
        let input = InputParams::new(&mut store, &config, &mut rng);
        let inner = (config.merge_mode == MergeMode::InnerTrans).then(|| {
            InnerTransParams::new(&mut store, config.item_dim, config.inner_layers, &mut rng)
        });
        let query_bank = (config.query_strategy == QueryStrategy::LearnableK).then(|| {
            store.normal("query_bank", &[config.queries, dm], config.init_std, &mut rng)
        });
        let cross = AttentionParams::new(&mut store, "cross", dm, config.heads, &mut rng);
        let layers = (0..config.self_layers)
            .map(|i| AttentionParams::new(&mut store, &format!("self.{}", i), dm, config.heads, &mut rng))
            .collect();
        let final_ln_gain = store.ones("final_ln.gain", &[dm]);
        let final_ln_bias = store.zeros("final_ln.bias", &[dm]);
        let head = Mlp::new(
            &mut store,
            "head",
            config.head_input_width(),
            config.head_hidden,
            1,
            &mut rng,
        );
        Ok(LongerModel {
            config,
            store,
            params: LongerParams {
                input,
                inner,
                query_bank,
                cross,
                layers,
                final_ln_gain,
                final_ln_bias,
                head,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint(self.store.version())
    }

    pub(crate) fn user_branch(
        &self,
        tape: &mut Tape,
        events: &[Event],
        user: &UserFeatures,
        reference_ts: i64,
    ) -> Result<UserBranch> {
        let cfg = &self.config;
        let p = &self.params;
        let bundle = encode_sequence(tape, events, reference_ts, &p.input, cfg)?;
        let mcfg = cfg.merge_config();
        let merged = merge(tape, bundle.tokens, &bundle.pad_mask, &mcfg, p.inner.as_ref())?;
        let mpad = merged_pad(&bundle.pad_mask, mcfg.k);
        let merged_metas = mpad
            .iter()
            .enumerate()
            .map(|(i, pad)| if *pad { TokenMeta::pad(i) } else { TokenMeta::seq(i) })
            .collect();
        let (queries, query_metas) =
            select_queries(tape, merged, &mpad, cfg.query_strategy, cfg.queries, p.query_bank)?;
        let globals = user_global_rows(tape, user, &p.input, cfg)?;
        let profile = match p.input.tables.profile {
            Some(t) => {
                let b = user.profile_bucket as usize;
                if b >= cfg.n_profiles {
                    return Err(Error::Lookup {
                        table: "profile",
                        id: b as u64,
                        size: cfg.n_profiles,
                    });
                }
                Some(tape.embed(t, vec![Some(b)])?)
            }
            None => None,
        };
        Ok(UserBranch {
            merged,
            merged_metas,
            queries,
            query_metas,
            globals,
            profile,
            last_ts: bundle.last_ts,
            encoded: bundle.tokens,
        })
    }

    pub(crate) fn global_metas(&self, with_target: bool) -> Vec<TokenMeta> {
        let m = self.config.global_tokens;
        let n = if with_target { m } else { m - 1 };
        (0..n).map(TokenMeta::global).collect()
    }

    /// Runs the attention stack over the branch plus an optional target row.
    pub(crate) fn run_stack(
        &self,
        tape: &mut Tape,
        branch: &UserBranch,
        target: Option<NodeId>,
    ) -> Result<StackNodes> {
        let globals = match target {
            Some(t) => tape.concat_rows(&[branch.globals, t])?,
            None => branch.globals,
        };
        let gm = self.global_metas(target.is_some());
        let r = tape.concat_rows(&[branch.merged, globals])?;
        let o = tape.concat_rows(&[branch.queries, globals])?;
        let key_metas: Vec<TokenMeta> = branch.merged_metas.iter().chain(&gm).copied().collect();
        let retained: Vec<TokenMeta> = branch.query_metas.iter().chain(&gm).copied().collect();

        let mut kv = Vec::with_capacity(1 + self.params.layers.len());
        let mut outputs = Vec::with_capacity(1 + self.params.layers.len());
        let mask = build_mask(&retained, &key_metas);
        let (k, v) = project_kv(tape, &self.params.cross, r)?;
        let mut x = attend(tape, &self.params.cross, o, k, v, &mask.additive)?;
        kv.push((k, v));
        outputs.push(x);
        let self_mask = build_mask(&retained, &retained);
        for layer in &self.params.layers {
            let (k, v) = project_kv(tape, layer, x)?;
            x = attend(tape, layer, x, k, v, &self_mask.additive)?;
            kv.push((k, v));
            outputs.push(x);
        }
        Ok(StackNodes { kv, outputs })
    }

    /// Head logit from the normalized final target row, the normalized
    /// final first-CLS row and the profile embedding.
    pub(crate) fn head_logit(
        &self,
        tape: &mut Tape,
        target_row: NodeId,
        cls_row: NodeId,
        profile: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let (g, b) = (self.params.final_ln_gain, self.params.final_ln_bias);
        let t = tape.layer_norm_params(target_row, g, b)?;
        let c = tape.layer_norm_params(cls_row, g, b)?;
        let mut parts = vec![t, c];
        parts.extend(profile);
        let input = tape.concat_cols(&parts)?;
        Ok((input, self.params.head.forward(tape, input)?))
    }

    /// Index of the first CLS row among the retained rows.
    pub(crate) fn cls_row_index(&self) -> usize {
        self.config.queries + GlobalLayout::of(&self.config).first_cls()
    }

    /// Records the full forward on `tape` and returns the logit node.
    pub fn logit_on(&self, tape: &mut Tape, sample: &Sample) -> Result<NodeId> {
        Ok(self.forward_nodes(tape, sample)?.logit)
    }

    fn forward_nodes(&self, tape: &mut Tape, sample: &Sample) -> Result<ForwardNodes> {
        let branch = self.user_branch(
            tape,
            &sample.events,
            &sample.user_features,
            sample.candidate.timestamp,
        )?;
        let target = target_global_row(
            tape,
            &sample.candidate,
            branch.last_ts,
            &self.params.input,
            &self.config,
        )?;
        let stack = self.run_stack(tape, &branch, Some(target))?;
        let last = *stack.outputs.last().expect("at least one layer");
        let rows = tape.value(last).rows();
        let t_row = tape.row(last, rows - 1)?;
        let c_row = tape.row(last, self.cls_row_index())?;
        let (head_input, logit) = self.head_logit(tape, t_row, c_row, branch.profile)?;
        Ok(ForwardNodes {
            branch,
            stack,
            head_input,
            logit,
        })
    }

    pub fn forward(&self, sample: &Sample) -> Result<(f64, ForwardTrace)> {
        let mut tape = Tape::new(&self.store);
        let n = self.forward_nodes(&mut tape, sample)?;
        let logit = tape.value(n.logit).data()[0];
        let p = crate::tensors::sigmoid(logit);
        let trace = ForwardTrace {
            encoded: tape.value(n.branch.encoded).clone(),
            merged: tape.value(n.branch.merged).clone(),
            query_metas: n.branch.query_metas.clone(),
            layers: n.stack.outputs.iter().map(|o| tape.value(*o).clone()).collect(),
            head_input: tape.value(n.head_input).clone(),
            logit,
            p,
        };
        Ok((p, trace))
    }

    pub fn predict(&self, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let z = self.logit_on(&mut tape, sample)?;
        Ok(crate::tensors::sigmoid(tape.value(z).data()[0]))
    }

    /// Forward mul-adds recorded by the tape for one sample.
    pub fn counted_mul_adds(&self, sample: &Sample) -> Result<u64> {
        let mut tape = Tape::new(&self.store);
        self.logit_on(&mut tape, sample)?;
        Ok(tape.ops().mul_adds())
    }
}

struct ForwardNodes {
    branch: UserBranch,
    stack: StackNodes,
    head_input: NodeId,
    logit: NodeId,
}
