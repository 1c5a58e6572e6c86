#![allow(dead_code)]

use longer::inputs::{Candidate, Event, Sample, UserFeatures};
use longer::model::{ModelConfig, QueryStrategy};
use longer::rng::substream;
use rand::Rng;

/// `L=8, d=2, K=2, m=3, k=3, N=2`.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        seq_len: 8,
        item_dim: 2,
        merge_factor: 2,
        global_tokens: 3,
        queries: 3,
        query_strategy: QueryStrategy::RecentK,
        self_layers: 2,
        heads: 1,
        item_emb_dim: 2,
        action_emb_dim: 2,
        time_emb_dim: 2,
        n_items: 6,
        n_actions: 2,
        n_users: 3,
        n_profiles: 2,
        head_hidden: 4,
        init_std: 0.5,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

pub fn random_sample(cfg: &ModelConfig, n_events: usize, rng: &mut impl Rng) -> Sample {
    let mut ts = 1_000_000i64;
    let events = (0..n_events)
        .map(|_| {
            ts += rng.random_range(1..5000);
            Event {
                item_id: rng.random_range(0..cfg.n_items as u32),
                action_type: rng.random_range(0..cfg.n_actions as u32),
                timestamp: ts,
            }
        })
        .collect();
    Sample {
        events,
        user_features: UserFeatures {
            uid: rng.random_range(0..cfg.n_users as u32),
            profile_bucket: rng.random_range(0..cfg.n_profiles as u32),
        },
        candidate: Candidate {
            item_id: rng.random_range(0..cfg.n_items as u32),
            timestamp: ts + rng.random_range(1..5000),
        },
        label: rng.random_range(0..2),
    }
}

pub fn rng(seed: u64, name: &str) -> longer::rng::Rng {
    substream(seed, name)
}
