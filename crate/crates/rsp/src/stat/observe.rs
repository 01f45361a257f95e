//! Observed test statistics over a probe set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::{AccessError, ModelHandle};
use crate::prefix::ProbeSet;
use crate::rng;

#[derive(Debug, Error)]
pub enum StatisticError {
    #[error("black-box estimation needs at least one query per prefix")]
    InvalidQueryCount,
    #[error(transparent)]
    Access(#[from] AccessError),
}

/// Per-prefix evaluation record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixOutcome {
    pub index: usize,
    /// Designated target candidate (zero-based).
    pub target: usize,
    pub hit: bool,
    /// Gray box: the argmax candidate. Black box: the unique empirical mode,
    /// absent when tied or when every query missed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<usize>,
    /// Black box only: queries that matched no candidate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub misses: Option<usize>,
}

/// Count prefixes whose target attains the candidate argmax on the target
/// model (gray-box access or better). Returns the count and the per-prefix
/// hit ledger in probe order.
pub fn observed_statistic_gray(
    target: &ModelHandle,
    probes: &ProbeSet,
) -> Result<(usize, Vec<PrefixOutcome>), StatisticError> {
    let hits = probes
        .entries
        .par_iter()
        .map(|entry| {
            let predicted = target.argmax_candidate(&entry.prefix, &probes.task)?;
            Ok(PrefixOutcome {
                index: entry.index,
                target: entry.target,
                hit: predicted == entry.target,
                predicted: Some(predicted),
                misses: None,
            })
        })
        .collect::<Result<Vec<_>, StatisticError>>()?;
    Ok((hits.iter().filter(|h| h.hit).count(), hits))
}

/// Black-box estimate: sample `t_queries` responses per prefix, count
/// frequencies over the candidates (misses excluded), and mark a hit iff the
/// target is the unique mode. Prefixes whose every query missed are recorded
/// as non-hits with `misses = t_queries`.
pub fn observed_statistic_black(
    target: &ModelHandle,
    probes: &ProbeSet,
    t_queries: usize,
    seed: u64,
) -> Result<(usize, Vec<PrefixOutcome>), StatisticError> {
    if t_queries == 0 {
        return Err(StatisticError::InvalidQueryCount);
    }
    let n = probes.task.n();
    let hits = probes
        .entries
        .par_iter()
        .map(|entry| {
            let mut counts = vec![0usize; n];
            let mut misses = 0usize;
            for q in 0..t_queries {
                let qseed = rng::derive(seed, "black-box-query", &[entry.index as u64, q as u64]);
                let response = target.sample_output(&entry.prefix, &probes.task, qseed)?;
                match probes.task.match_response(&response) {
                    Some(c) => counts[c] += 1,
                    None => misses += 1,
                }
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            let unique_mode = if best == 0 {
                None
            } else {
                let mut leaders = counts.iter().enumerate().filter(|(_, &c)| c == best);
                let leader = leaders.next().map(|(i, _)| i);
                if leaders.next().is_some() {
                    None // tied mode: conservatively no prediction
                } else {
                    leader
                }
            };
            Ok(PrefixOutcome {
                index: entry.index,
                target: entry.target,
                hit: unique_mode == Some(entry.target),
                predicted: unique_mode,
                misses: Some(misses),
            })
        })
        .collect::<Result<Vec<_>, StatisticError>>()?;
    Ok((hits.iter().filter(|h| h.hit).count(), hits))
}
