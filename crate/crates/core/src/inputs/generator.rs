//! Synthetic behavior generator with a known label mechanism.
//!
//! Items belong to interests by `interest = item % n_interests`. Each user
//! carries a small interest set that drifts: before every event, with
//! probability `drift_rate`, one member is swapped for a fresh interest.
//! An event is a uniformly random item with probability `event_noise_rate`,
//! otherwise an item of one of the user's current interests.
//!
//! A sample cuts the user's timeline at some point. Its candidate interest
//! is drawn, with probability ½ each, from interests that occur in the
//! sample's history ("present") or from interests that never occur
//! ("absent"). With `plant_range = [lo, hi]`, present interests are
//! restricted to those whose most recent occurrence lies `lo..hi` events
//! from the end.
//!
//! The label is Bernoulli with mean
//! `noise_rate · ½ + (1 − noise_rate) · (p_present if present else p_absent)`.
//! Far-past occurrences count, so a model that sees more history can rank
//! better.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{Candidate, Dataset, Event, Sample, UserFeatures};
use crate::error::{Error, Result};
use crate::rng::substream;

const START_TS: i64 = 1_700_000_000;
const MEAN_GAP_SECONDS: f64 = 900.0;

fn default_p_present() -> f64 {
    0.95
}

fn default_p_absent() -> f64 {
    0.05
}

fn default_stride() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub samples_per_user: usize,
    pub vocab: usize,
    pub n_interests: usize,
    pub l_max: usize,
    pub min_events: usize,
    pub interests_per_user: usize,
    pub drift_rate: f64,
    pub noise_rate: f64,
    pub event_noise_rate: f64,
    pub n_actions: usize,
    pub n_profiles: usize,
    #[serde(default)]
    pub plant_range: Option<[usize; 2]>,
    #[serde(default = "default_p_present")]
    pub p_present: f64,
    #[serde(default = "default_p_absent")]
    pub p_absent: f64,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_users: 1000,
            samples_per_user: 10,
            vocab: 256,
            n_interests: 128,
            l_max: 256,
            min_events: 128,
            interests_per_user: 3,
            drift_rate: 0.05,
            noise_rate: 0.0,
            event_noise_rate: 0.02,
            n_actions: 4,
            n_profiles: 8,
            plant_range: None,
            p_present: default_p_present(),
            p_absent: default_p_absent(),
            sample_stride: default_stride(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_interests == 0 || self.vocab < self.n_interests {
            return fail(format!(
                "vocab ({}) must be >= n_interests ({}) > 0",
                self.vocab, self.n_interests
            ));
        }
        if self.interests_per_user == 0 || self.interests_per_user >= self.n_interests {
            return fail("interests_per_user must be in 1..n_interests".into());
        }
        if self.l_max == 0 || self.min_events > self.l_max {
            return fail("need 0 < l_max and min_events <= l_max".into());
        }
        if self.n_actions == 0 || self.n_profiles == 0 {
            return fail("n_actions and n_profiles must be positive".into());
        }
        for (name, v) in [
            ("drift_rate", self.drift_rate),
            ("noise_rate", self.noise_rate),
            ("event_noise_rate", self.event_noise_rate),
            ("p_present", self.p_present),
            ("p_absent", self.p_absent),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{} = {} outside [0, 1]", name, v));
            }
        }
        let balance = self.label_probability(true) * 0.5 + self.label_probability(false) * 0.5;
        if !(0.2..=0.8).contains(&balance) {
            return fail(format!("expected positive rate {:.3} outside [0.2, 0.8]", balance));
        }
        if let Some([lo, hi]) = self.plant_range {
            if lo >= hi {
                return fail("plant_range must satisfy lo < hi".into());
            }
        }
        if self.sample_stride == 0 {
            return fail("sample_stride must be positive".into());
        }
        Ok(())
    }

    pub fn interest_of(&self, item: u32) -> usize {
        item as usize % self.n_interests
    }

    /// Bernoulli mean of the label given whether the candidate's interest
    /// occurs in the history. Present and absent means straddle ½ whenever
    /// `noise_rate < 1` and `p_absent < ½ < p_present`.
    pub fn label_probability(&self, present: bool) -> f64 {
        let signal = if present { self.p_present } else { self.p_absent };
        self.noise_rate * 0.5 + (1.0 - self.noise_rate) * signal
    }

    fn random_item_of(&self, interest: usize, rng: &mut impl Rng) -> u32 {
        let per = (self.vocab - interest).div_ceil(self.n_interests);
        (interest + self.n_interests * rng.random_range(0..per)) as u32
    }
}

/// Deterministic in `(cfg, seed)`; users are generated from independent
/// substreams in uid order.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let gap = Exp::new(1.0 / MEAN_GAP_SECONDS).expect("positive rate");
    let mut out = Vec::with_capacity(cfg.n_users * cfg.samples_per_user);

    for uid in 0..cfg.n_users {
        let mut rng = substream(seed, &format!("generator/user/{}", uid));
        let user = UserFeatures {
            uid: uid as u32,
            profile_bucket: rng.random_range(0..cfg.n_profiles) as u32,
        };
        let base_len = rng.random_range(cfg.min_events..=cfg.l_max);
        let total = base_len + cfg.samples_per_user.saturating_sub(1) * cfg.sample_stride;

        let mut interests: Vec<usize> = Vec::with_capacity(cfg.interests_per_user);
        while interests.len() < cfg.interests_per_user {
            let c = rng.random_range(0..cfg.n_interests);
            if !interests.contains(&c) {
                interests.push(c);
            }
        }

        let mut ts = START_TS + rng.random_range(0..86_400);
        let mut timeline = Vec::with_capacity(total);
        for _ in 0..total {
            if rng.random_bool(cfg.drift_rate) {
                let slot = rng.random_range(0..interests.len());
                loop {
                    let c = rng.random_range(0..cfg.n_interests);
                    if !interests.contains(&c) {
                        interests[slot] = c;
                        break;
                    }
                }
            }
            let item = if rng.random_bool(cfg.event_noise_rate) {
                rng.random_range(0..cfg.vocab) as u32
            } else {
                let c = interests[rng.random_range(0..interests.len())];
                cfg.random_item_of(c, &mut rng)
            };
            ts += 1 + gap.sample(&mut rng) as i64;
            timeline.push(Event {
                item_id: item,
                action_type: rng.random_range(0..cfg.n_actions) as u32,
                timestamp: ts,
            });
        }

        for j in 0..cfg.samples_per_user {
            let cut = base_len + j * cfg.sample_stride;
            let events = timeline[cut.saturating_sub(cfg.l_max)..cut].to_vec();
            let last_ts = events.last().map_or(ts, |e| e.timestamp);
            let cand_ts = last_ts + 1 + gap.sample(&mut rng) as i64;

            let (present_pool, absent_pool) = candidate_pools(cfg, &events);
            let want_present = rng.random_bool(0.5);
            let (first, second) = if want_present {
                (&present_pool, &absent_pool)
            } else {
                (&absent_pool, &present_pool)
            };
            let interest = if !first.is_empty() {
                first[rng.random_range(0..first.len())]
            } else if !second.is_empty() {
                second[rng.random_range(0..second.len())]
            } else {
                rng.random_range(0..cfg.n_interests)
            };
            let present = events
                .iter()
                .any(|e| cfg.interest_of(e.item_id) == interest);
            let label = rng.random_bool(cfg.label_probability(present)) as u8;

            out.push(Sample {
                events,
                user_features: user,
                candidate: Candidate {
                    item_id: cfg.random_item_of(interest, &mut rng),
                    timestamp: cand_ts,
                },
                label,
            });
        }
    }
    Ok(out)
}

/// Eligible present interests (respecting `plant_range`) and interests
/// absent from the history, both in ascending order.
fn candidate_pools(cfg: &GeneratorConfig, events: &[Event]) -> (Vec<usize>, Vec<usize>) {
    let mut last_seen = vec![None; cfg.n_interests];
    for (i, e) in events.iter().enumerate() {
        last_seen[cfg.interest_of(e.item_id)] = Some(events.len() - 1 - i);
    }
    let seen: BTreeSet<usize> = (0..cfg.n_interests)
        .filter(|&c| last_seen[c].is_some())
        .collect();
    let present = seen
        .iter()
        .copied()
        .filter(|&c| match (cfg.plant_range, last_seen[c]) {
            (Some([lo, hi]), Some(dist)) => dist >= lo && dist < hi,
            _ => true,
        })
        .collect();
    let absent = (0..cfg.n_interests).filter(|c| !seen.contains(c)).collect();
    (present, absent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::auc;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_users: 40,
            samples_per_user: 4,
            l_max: 64,
            min_events: 16,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(&small(), 11).unwrap();
        let b = generate_dataset(&small(), 11).unwrap();
        let c = generate_dataset(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn samples_respect_invariants() {
        let cfg = small();
        for s in generate_dataset(&cfg, 3).unwrap() {
            s.validate(cfg.l_max).unwrap();
        }
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = GeneratorConfig {
            vocab: 10,
            n_interests: 20,
            ..small()
        };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_users_gives_empty_dataset() {
        let cfg = GeneratorConfig {
            n_users: 0,
            ..small()
        };
        assert!(generate_dataset(&cfg, 0).unwrap().is_empty());
    }

    #[test]
    fn label_mean_straddles_half() {
        let cfg = small();
        assert!(cfg.label_probability(true) > 0.5);
        assert!(cfg.label_probability(false) < 0.5);
        let noisy = GeneratorConfig {
            noise_rate: 1.0,
            ..small()
        };
        assert_eq!(noisy.label_probability(true), noisy.label_probability(false));
    }

    #[test]
    fn class_balance_in_range() {
        let data = generate_dataset(&small(), 5).unwrap();
        let pos = data.iter().filter(|s| s.label == 1).count() as f64 / data.len() as f64;
        assert!((0.2..=0.8).contains(&pos), "positive rate {}", pos);
    }

    fn oracle_scores(cfg: &GeneratorConfig, data: &[Sample], window: usize) -> Vec<f64> {
        data.iter()
            .map(|s| {
                let c = cfg.interest_of(s.candidate.item_id);
                let start = s.events.len().saturating_sub(window);
                let present = s.events[start..]
                    .iter()
                    .any(|e| cfg.interest_of(e.item_id) == c);
                cfg.label_probability(present)
            })
            .collect()
    }

    fn labels(data: &[Sample]) -> Vec<u8> {
        data.iter().map(|s| s.label).collect()
    }

    #[test]
    fn pure_noise_labels_are_unpredictable() {
        let cfg = GeneratorConfig {
            n_users: 1000,
            samples_per_user: 10,
            noise_rate: 1.0,
            l_max: 64,
            min_events: 32,
            ..GeneratorConfig::default()
        };
        let data = generate_dataset(&cfg, 21).unwrap();
        assert_eq!(data.len(), 10_000);
        // Best achievable: the generator's own label mean is constant, so any
        // history-based score is noise. Check the full-window oracle.
        let a = auc(&oracle_scores(&cfg, &data, usize::MAX), &labels(&data)).unwrap();
        assert!((a - 0.5).abs() <= 0.02, "auc {}", a);
    }

    #[test]
    fn planted_far_interest_needs_full_window() {
        let cfg = GeneratorConfig {
            n_users: 300,
            samples_per_user: 4,
            l_max: 256,
            min_events: 256,
            noise_rate: 0.0,
            plant_range: Some([64, 256]),
            ..GeneratorConfig::default()
        };
        let data = generate_dataset(&cfg, 8).unwrap();
        let y = labels(&data);
        let short = auc(&oracle_scores(&cfg, &data, 64), &y).unwrap();
        let full = auc(&oracle_scores(&cfg, &data, usize::MAX), &y).unwrap();
        assert!((short - 0.5).abs() <= 0.02, "last-64 auc {}", short);
        assert!(full > 0.9, "full-window auc {}", full);
    }
}
