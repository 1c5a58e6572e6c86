//! Behavior records, the synthetic generator, and input encoding.

pub(crate) mod encode;
mod generator;
mod io;

pub use encode::{
    assemble_global_tokens, encode_sequence, EmbeddingTables, GlobalLayout, InputBundle,
    InputParams, TIME_BUCKETS,
};
pub use generator::{generate_dataset, GeneratorConfig};
pub use io::{read_dataset, write_dataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub item_id: u32,
    pub action_type: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserFeatures {
    pub uid: u32,
    pub profile_bucket: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub item_id: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub events: Vec<Event>,
    pub user_features: UserFeatures,
    pub candidate: Candidate,
    pub label: u8,
}

impl Sample {
    /// Checks ordering, leakage and length invariants.
    pub fn validate(&self, l_max: usize) -> Result<()> {
        if self.events.len() > l_max {
            return Err(Error::Schema(format!(
                "sample has {} events, limit {}",
                self.events.len(),
                l_max
            )));
        }
        if self.events.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
            return Err(Error::Schema("events not sorted by timestamp".into()));
        }
        if let Some(last) = self.events.last() {
            if last.timestamp > self.candidate.timestamp {
                return Err(Error::Schema("event after candidate timestamp".into()));
            }
        }
        if self.label > 1 {
            return Err(Error::Schema(format!("label {} not in {{0,1}}", self.label)));
        }
        Ok(())
    }
}

pub type Dataset = Vec<Sample>;

/// Log-2 bucket of a non-negative time difference in seconds:
/// the bit length of `diff + 1`, capped at `TIME_BUCKETS - 1`.
/// Bucket 0 is reserved for "no reference event".
pub fn time_bucket(diff_seconds: i64) -> usize {
    let v = diff_seconds.max(0) as u64 + 1;
    let bits = (64 - v.leading_zeros()) as usize;
    bits.min(TIME_BUCKETS - 1)
}

/// Splits each user's samples by candidate time: the most recent
/// `round(frac · n)` samples of every user go to the held-out set.
pub fn temporal_split(data: &[Sample], frac: f64) -> (Dataset, Dataset) {
    use std::collections::BTreeMap;
    let mut by_user: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_user.entry(s.user_features.uid).or_default().push(i);
    }
    let mut held = vec![false; data.len()];
    for idx in by_user.values_mut() {
        idx.sort_by_key(|&i| (data[i].candidate.timestamp, i));
        let n_test = ((idx.len() as f64) * frac).round() as usize;
        for &i in &idx[idx.len() - n_test.min(idx.len())..] {
            held[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, h) in data.iter().zip(held) {
        if h {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}
