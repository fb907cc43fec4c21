//! Capacity-aware token reroute.
//!
//! Each round selects the top-k available experts per token, then every
//! expert over capacity masks its lowest-score selections in the score matrix
//! (same rule as score-metric token drop). Masked mappings are never restored,
//! so rejected tokens fall through to their next-best available expert on the
//! following round. The result is the last round's post-drop selection, which
//! always respects capacity.

use serde::{Deserialize, Serialize};

use crate::capacity::{score_drop_order, Capacity};
use crate::error::{Error, Result};
use crate::gating::{topk_row, AssignmentSet, LoadVector, Mapping, ScoreMatrix};
use crate::scalar::Scalar;

pub const DEFAULT_ROUNDS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerouteConfig {
    pub rounds: usize,
    pub capacity: Capacity,
    pub top_k: usize,
}

impl RerouteConfig {
    pub fn new(rounds: usize, capacity: Capacity, top_k: usize) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::InvalidArgument(
                "reroute needs at least one round".into(),
            ));
        }
        if top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        Ok(Self {
            rounds,
            capacity,
            top_k,
        })
    }
}

/// Loads after a round's drop step and how many mappings that round masked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub loads: LoadVector,
    pub dropped: usize,
}

impl RoundSummary {
    pub fn retained(&self) -> u64 {
        self.loads.total()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerouteResult<T> {
    pub assignments: AssignmentSet<T>,
    pub rounds: Vec<RoundSummary>,
    pub updated_scores: ScoreMatrix<T>,
}

/// Outcome of running exactly `rounds` rounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerouteSummary {
    pub rounds: usize,
    pub per_round: Vec<RoundSummary>,
    pub retained: u64,
}

pub fn reroute<T: Scalar>(
    scores: &ScoreMatrix<T>,
    cfg: &RerouteConfig,
) -> Result<RerouteResult<T>> {
    let (t, n) = (scores.num_tokens(), scores.num_experts());
    if cfg.top_k > n {
        return Err(Error::InvalidArgument(format!(
            "top_k {} exceeds {n} experts",
            cfg.top_k
        )));
    }
    let mut s = scores.clone();
    let mut selection: Vec<Vec<(usize, T)>> = vec![Vec::new(); t];
    // Rows whose scores changed since their last top-k; others keep their selection.
    let mut stale = vec![true; t];
    let mut buf = Vec::with_capacity(n);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut converged = false;

    for _ in 0..cfg.rounds {
        if converged {
            let last = rounds.last().cloned().expect("a converged run has a round");
            rounds.push(last);
            continue;
        }
        for (token, sel) in selection.iter_mut().enumerate() {
            if std::mem::take(&mut stale[token]) {
                topk_row(s.row(token), cfg.top_k, &mut buf);
                sel.clone_from(&buf);
            }
        }

        let mut columns: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for (token, sel) in selection.iter().enumerate() {
            for &(expert, score) in sel {
                columns[expert].push((token, score));
            }
        }

        let mut dropped = 0;
        for (expert, column) in columns.iter_mut().enumerate() {
            let excess = cfg.capacity.overflow(column.len() as u64) as usize;
            if excess == 0 {
                continue;
            }
            score_drop_order(column);
            for &(token, _) in &column[..excess] {
                s.mask(token, expert);
                selection[token].retain(|e| e.0 != expert);
                stale[token] = true;
            }
            dropped += excess;
        }

        let mut loads = vec![0u64; n];
        for sel in &selection {
            for &(expert, _) in sel {
                loads[expert] += 1;
            }
        }
        rounds.push(RoundSummary {
            loads: LoadVector(loads),
            dropped,
        });
        converged = dropped == 0;
    }

    let mappings = selection
        .iter()
        .enumerate()
        .flat_map(|(token, sel)| {
            sel.iter().map(move |&(expert, score)| Mapping {
                token,
                expert,
                score,
            })
        })
        .collect();
    Ok(RerouteResult {
        assignments: AssignmentSet::from_sorted_unchecked(t, n, cfg.top_k, mappings),
        rounds,
        updated_scores: s,
    })
}

/// Summaries for `R = 1..=max_rounds`. Rounds are prefix-deterministic, so one
/// `max_rounds` run yields every shorter run.
pub fn reroute_sweep<T: Scalar>(
    scores: &ScoreMatrix<T>,
    top_k: usize,
    capacity: Capacity,
    max_rounds: usize,
) -> Result<Vec<RerouteSummary>> {
    let cfg = RerouteConfig::new(max_rounds, capacity, top_k)?;
    let full = reroute(scores, &cfg)?;
    Ok((1..=max_rounds)
        .map(|r| RerouteSummary {
            rounds: r,
            per_round: full.rounds[..r].to_vec(),
            retained: full.rounds[r - 1].retained(),
        })
        .collect())
}
