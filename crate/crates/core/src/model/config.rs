use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::merge::{MergeConfig, MergeMode};

/// How the `k` sequence-side queries of the first layer are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    RecentK,
    UniformK,
    LearnableK,
    RecentHalfUniformHalf,
}

impl QueryStrategy {
    /// Parses `recent100`, `uniform64`, `learnable16`, `recent50+uniform50`
    /// style specs into a strategy and query count.
    pub fn parse_spec(spec: &str) -> Result<(QueryStrategy, usize)> {
        let bad = || Error::Config(format!("unrecognized query strategy spec '{}'", spec));
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if let Some((a, b)) = spec.split_once('+') {
            let r = num(a.strip_prefix("recent").ok_or_else(bad)?)?;
            let b = b.strip_prefix("rest").unwrap_or(b);
            let u = num(b.strip_prefix("uniform").or_else(|| b.strip_prefix("unif")).ok_or_else(bad)?)?;
            // recent takes ⌈k/2⌉, uniform ⌊k/2⌋
            if r != u && r != u + 1 {
                return Err(bad());
            }
            return Ok((QueryStrategy::RecentHalfUniformHalf, r + u));
        }
        for (prefix, s) in [
            ("recent", QueryStrategy::RecentK),
            ("uniform", QueryStrategy::UniformK),
            ("learnable", QueryStrategy::LearnableK),
        ] {
            if let Some(n) = spec.strip_prefix(prefix) {
                return Ok((s, num(n)?));
            }
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of each user's timeline held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 4,
            holdout: 0.1,
            seed: 0,
        }
    }
}

/// Every architectural hyperparameter. Model width is `merge_factor ·
/// item_dim` and is derived, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw sequence length `L`.
    pub seq_len: usize,
    /// Per-item token width `d`.
    pub item_dim: usize,
    /// Merge group size `K`.
    pub merge_factor: usize,
    pub merge_mode: MergeMode,
    pub inner_layers: usize,
    /// Global token count `m`: `[UID, CLS…, target]` for `m >= 3`,
    /// `[CLS, target]` for `m == 2`.
    pub global_tokens: usize,
    /// Sequence query count `k`.
    pub queries: usize,
    pub query_strategy: QueryStrategy,
    /// Self-causal layer count `N`.
    pub self_layers: usize,
    pub heads: usize,
    pub item_emb_dim: usize,
    pub action_emb_dim: usize,
    pub time_emb_dim: usize,
    pub n_items: usize,
    pub n_actions: usize,
    pub n_users: usize,
    pub n_profiles: usize,
    pub head_hidden: usize,
    /// Feed the user profile embedding to the prediction head.
    pub profile_in_head: bool,
    pub init_std: f64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 256,
            item_dim: 8,
            merge_factor: 4,
            merge_mode: MergeMode::Concat,
            inner_layers: 1,
            global_tokens: 3,
            queries: 26,
            query_strategy: QueryStrategy::RecentK,
            self_layers: 2,
            heads: 1,
            item_emb_dim: 8,
            action_emb_dim: 4,
            time_emb_dim: 4,
            n_items: 256,
            n_actions: 4,
            n_users: 1000,
            n_profiles: 8,
            head_hidden: 32,
            profile_in_head: true,
            init_std: 0.1,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    /// `D = K·d`.
    pub fn model_width(&self) -> usize {
        self.merge_factor * self.item_dim
    }

    /// `L` rounded up to a multiple of `K`.
    pub fn padded_len(&self) -> usize {
        self.seq_len.div_ceil(self.merge_factor.max(1)) * self.merge_factor.max(1)
    }

    /// Number of merged sequence tokens `L/K`.
    pub fn merged_len(&self) -> usize {
        self.padded_len() / self.merge_factor.max(1)
    }

    pub fn has_uid_token(&self) -> bool {
        self.global_tokens >= 3
    }

    pub fn cls_tokens(&self) -> usize {
        self.global_tokens - 1 - usize::from(self.has_uid_token())
    }

    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            k: self.merge_factor,
            mode: self.merge_mode,
            inner_layers: self.inner_layers,
        }
    }

    pub fn head_input_width(&self) -> usize {
        2 * self.model_width() + if self.profile_in_head { self.item_dim } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.seq_len == 0 || self.item_dim == 0 || self.merge_factor == 0 {
            return fail("seq_len, item_dim and merge_factor must be positive");
        }
        if self.global_tokens < 2 {
            return fail("global_tokens must be >= 2 (CLS and target)");
        }
        if self.queries == 0 {
            return fail("queries (k) must be positive");
        }
        if self.query_strategy != QueryStrategy::LearnableK && self.queries > self.merged_len() {
            return fail("queries (k) must not exceed the merged length L/K");
        }
        if self.self_layers == 0 {
            return fail("self_layers (N) must be >= 1");
        }
        if self.heads == 0 || self.model_width() % self.heads != 0 {
            return fail("heads must divide the model width K·d");
        }
        if self.merge_mode == MergeMode::InnerTrans && self.inner_layers == 0 {
            return fail("inner_layers must be >= 1 for InnerTrans");
        }
        if self.n_items == 0 || self.n_actions == 0 || self.n_users == 0 || self.n_profiles == 0 {
            return fail("vocabulary sizes must be positive");
        }
        if self.head_hidden == 0 || self.item_emb_dim == 0 || self.time_emb_dim == 0 {
            return fail("head_hidden and embedding widths must be positive");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail("init_std must be positive");
        }
        Ok(())
    }

    /// Stable 64-bit digest of the canonical JSON form of this config.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let out = Sha256::digest(&json);
        u64::from_le_bytes(out[..8].try_into().expect("32-byte digest"))
    }

    /// Fingerprint of (architecture, parameter version).
    pub fn fingerprint(&self, param_version: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(param_version.to_le_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("32-byte digest"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model_width(), 32);
        assert_eq!(c.merged_len(), 64);
    }

    #[test]
    fn padding_rounds_up() {
        let c = ModelConfig {
            seq_len: 10,
            merge_factor: 4,
            ..ModelConfig::default()
        };
        assert_eq!(c.padded_len(), 12);
        assert_eq!(c.merged_len(), 3);
    }

    #[test]
    fn strategy_specs() {
        assert_eq!(
            QueryStrategy::parse_spec("recent100").unwrap(),
            (QueryStrategy::RecentK, 100)
        );
        assert_eq!(
            QueryStrategy::parse_spec("uniform8").unwrap(),
            (QueryStrategy::UniformK, 8)
        );
        assert_eq!(
            QueryStrategy::parse_spec("learnable4").unwrap(),
            (QueryStrategy::LearnableK, 4)
        );
        assert_eq!(
            QueryStrategy::parse_spec("recent50+uniform50").unwrap(),
            (QueryStrategy::RecentHalfUniformHalf, 100)
        );
        assert!(QueryStrategy::parse_spec("sideways3").is_err());
    }

    #[test]
    fn rejects_too_many_queries() {
        let c = ModelConfig {
            queries: 65,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
