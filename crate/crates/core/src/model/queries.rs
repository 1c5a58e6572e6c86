//! Choice of the `k` sequence-side queries for the first layer.

use super::QueryStrategy;
use crate::attention::TokenMeta;
use crate::error::{Error, Result};
use crate::tensors::{NodeId, ParamId, Tape};

/// `⌈(j+1)·n/k⌉ − 1` for `j < k`, offset by `start`.
fn uniform(start: usize, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|j| start + ((j + 1) * n).div_ceil(k) - 1).collect()
}

/// Merged-token indices picked by a sampling strategy, oldest first.
/// `None` entries are pad queries. `pad` must be a prefix mask, which is
/// what left-padding produces.
pub fn query_indices(pad: &[bool], strategy: QueryStrategy, k: usize) -> Result<Vec<Option<usize>>> {
    if k == 0 {
        return Err(Error::Config("query count k must be positive".into()));
    }
    let start = pad.iter().take_while(|p| **p).count();
    let n = pad.len() - start;
    let mut picked: Vec<usize> = match strategy {
        QueryStrategy::LearnableK => {
            return Err(Error::Config("learnable queries have no indices".into()))
        }
        QueryStrategy::RecentK => (pad.len() - n.min(k)..pad.len()).collect(),
        QueryStrategy::UniformK if n >= k => uniform(start, n, k),
        QueryStrategy::UniformK => (start..pad.len()).collect(),
        QueryStrategy::RecentHalfUniformHalf => {
            let r = k.div_ceil(2).min(n);
            let u = k / 2;
            let recent_start = pad.len() - r;
            let prefix = n - r;
            let mut idx: Vec<usize> = (recent_start..pad.len()).collect();
            if u > 0 && prefix > 0 {
                idx.extend(uniform(start, prefix, u));
            }
            idx.sort_unstable();
            idx.dedup();
            // backfill from the most recent unused tokens
            let mut cand = (start..pad.len()).rev();
            while idx.len() < k.min(n) {
                let c = cand.next().expect("enough valid tokens");
                if !idx.contains(&c) {
                    idx.push(c);
                }
            }
            idx
        }
    };
    picked.sort_unstable();
    let mut out: Vec<Option<usize>> = vec![None; k - picked.len()];
    out.extend(picked.into_iter().map(Some));
    Ok(out)
}

/// Returns the `k × D` query rows and their mask labels.
pub fn select_queries(
    tape: &mut Tape,
    merged: NodeId,
    pad: &[bool],
    strategy: QueryStrategy,
    k: usize,
    bank: Option<ParamId>,
) -> Result<(NodeId, Vec<TokenMeta>)> {
    if strategy == QueryStrategy::LearnableK {
        let bank = bank.ok_or_else(|| Error::Config("learnable strategy without a bank".into()))?;
        let node = tape.param(bank);
        if tape.value(node).rows() != k {
            return Err(Error::dim("select_queries", "bank rows != k"));
        }
        let max = pad.len().saturating_sub(1);
        return Ok((node, vec![TokenMeta::seq(max); k]));
    }
    let idx = query_indices(pad, strategy, k)?;
    let metas = idx
        .iter()
        .map(|i| match i {
            Some(i) => TokenMeta::seq(*i),
            None => TokenMeta::pad(0),
        })
        .collect();
    Ok((tape.gather_rows(merged, idx)?, metas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(v: Vec<Option<usize>>) -> Vec<usize> {
        v.into_iter().flatten().collect()
    }

    #[test]
    fn recent_full_is_identity() {
        let idx = query_indices(&[false; 6], QueryStrategy::RecentK, 6).unwrap();
        assert_eq!(flat(idx), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_example() {
        let idx = query_indices(&[false; 10], QueryStrategy::UniformK, 5).unwrap();
        assert_eq!(flat(idx), vec![1, 3, 5, 7, 9]);
    }

    #[test]
    fn short_sequence_gets_pad_queries() {
        let mut pad = vec![true; 7];
        pad.extend([false; 3]);
        let idx = query_indices(&pad, QueryStrategy::RecentK, 5).unwrap();
        assert_eq!(idx, vec![None, None, Some(7), Some(8), Some(9)]);
    }

    #[test]
    fn mixed_strategy_example() {
        // recent 3 of 10 → {7,8,9}; uniform 2 over prefix 0..7 → {3,6}
        let idx = query_indices(&[false; 10], QueryStrategy::RecentHalfUniformHalf, 5).unwrap();
        assert_eq!(flat(idx), vec![3, 6, 7, 8, 9]);
    }

    proptest! {
        #[test]
        fn selections_are_valid(n_pad in 0usize..12, n_valid in 0usize..20, k in 1usize..16, s in 0usize..3) {
            let strategy = [QueryStrategy::RecentK, QueryStrategy::UniformK, QueryStrategy::RecentHalfUniformHalf][s];
            let mut pad = vec![true; n_pad];
            pad.extend(vec![false; n_valid]);
            let idx = query_indices(&pad, strategy, k).unwrap();
            prop_assert_eq!(idx.len(), k);
            let picked = flat(idx);
            prop_assert_eq!(picked.len(), k.min(n_valid));
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(picked.iter().all(|&i| i >= n_pad && i < pad.len()));
            if strategy != QueryStrategy::UniformK && n_valid > 0 {
                prop_assert_eq!(*picked.last().unwrap(), pad.len() - 1);
            }
        }
    }
}
