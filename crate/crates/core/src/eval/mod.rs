//! Full-catalog ranking metrics: HR@K and NDCG@K per behavior plus
//! cumulative reward@K.

mod report;

pub use report::{aggregate_reports, BehaviorMetrics, KMetrics, MetricsReport, SCHEMA_VERSION};

use crate::autodiff::Tape;
use crate::data::{build_transitions, Behavior, Session, StateWindow, CLICK_REWARD, PURCHASE_REWARD};
use crate::error::{Error, Result};
use crate::mcrl::PolicyNet;

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// States encoded per forward pass during evaluation.
const EVAL_BATCH: usize = 256;

/// 1-based rank of `target` among items `1..=logits.len()`.
///
/// Ties are broken in favour of the smaller item id. Items in `excluded`
/// (other than the target) are left out of the ranking.
pub fn rank_of_target(logits: &[f64], target: u32, excluded: &[u32]) -> Result<usize> {
    if target == 0 || target as usize > logits.len() {
        return Err(Error::Lookup {
            index: target as usize,
            max: logits.len(),
        });
    }
    let t = target as usize - 1;
    let s = logits[t];
    let mut rank = 1;
    for (j, &x) in logits.iter().enumerate() {
        if x > s || (x == s && j < t) {
            rank += 1;
        }
    }
    let mut excluded = excluded.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    for e in excluded {
        let j = e as usize;
        if j == 0 || j > logits.len() || j - 1 == t {
            continue;
        }
        let x = logits[j - 1];
        if x > s || (x == s && j - 1 < t) {
            rank -= 1;
        }
    }
    Ok(rank)
}

/// Fraction of ranks within `k`; `None` without events.
pub fn hr_at_k(ranks: &[usize], k: usize) -> Option<f64> {
    if ranks.is_empty() {
        return None;
    }
    Some(hits_at_k(ranks, k) as f64 / ranks.len() as f64)
}

pub fn hits_at_k(ranks: &[usize], k: usize) -> usize {
    ranks.iter().filter(|&&r| r <= k).count()
}

/// Mean of `1 / log2(1 + rank)` over hits within `k`; `None` without events.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Option<f64> {
    if ranks.is_empty() {
        return None;
    }
    let sum: f64 = ranks.iter().filter(|&&r| r <= k).map(|&r| ndcg_gain(r)).sum();
    Some(sum / ranks.len() as f64)
}

pub fn ndcg_gain(rank: usize) -> f64 {
    1.0 / ((1 + rank) as f64).log2()
}

/// Ranks of the held-out events, split by behavior.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankLists {
    pub click: Vec<usize>,
    pub purchase: Vec<usize>,
}

impl RankLists {
    pub fn push(&mut self, behavior: Behavior, rank: usize) {
        match behavior {
            Behavior::Click => self.click.push(rank),
            Behavior::Purchase => self.purchase.push(rank),
        }
    }

    /// Builds the report for the given cutoffs. Ranks are sorted first so the
    /// floating-point sums do not depend on session order.
    pub fn report(&self, ks: &[usize]) -> MetricsReport {
        let behavior = |ranks: &[usize]| {
            let mut ranks = ranks.to_vec();
            ranks.sort_unstable();
            BehaviorMetrics {
            events: ranks.len(),
            at: ks
                .iter()
                .map(|&k| KMetrics {
                    k,
                    hits: hits_at_k(&ranks, k) as f64,
                    hr: hr_at_k(&ranks, k),
                    ndcg: ndcg_at_k(&ranks, k),
                })
                .collect(),
            }
        };
        let click = behavior(&self.click);
        let purchase = behavior(&self.purchase);
        let cumulative_reward = click
            .at
            .iter()
            .zip(&purchase.at)
            .map(|(c, p)| CLICK_REWARD * c.hits + PURCHASE_REWARD * p.hits)
            .collect();
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            ks: ks.to_vec(),
            click,
            purchase,
            cumulative_reward,
            ..MetricsReport::default()
        }
    }
}

/// Anything that scores the catalog for a batch of states.
pub trait Scorer {
    fn item_count(&self) -> u32;

    /// Row-major `[windows.len(), item_count]` scores; column `j` is item `j + 1`.
    fn score(&self, windows: &[StateWindow]) -> Result<Vec<f64>>;
}

impl Scorer for PolicyNet {
    fn item_count(&self) -> u32 {
        PolicyNet::item_count(self)
    }

    fn score(&self, windows: &[StateWindow]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = self.encode(&mut tape, &p, windows)?;
        let logits = self.policy_logits(&mut tape, &p, z)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

/// Replays every session from its second event, ranking the true next item.
pub fn evaluate_ranks<S: Scorer + ?Sized>(scorer: &S, sessions: &[Session], exclude_seen: bool) -> Result<RankLists> {
    if sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let transitions = build_transitions(sessions);
    let n = scorer.item_count() as usize;
    let mut ranks = RankLists::default();
    for chunk in transitions.chunks(EVAL_BATCH) {
        let windows: Vec<StateWindow> = chunk.iter().map(|t| t.state).collect();
        let scores = scorer.score(&windows)?;
        if scores.len() != windows.len() * n {
            return Err(Error::Shape(format!(
                "scorer returned {} scores for {} states over {n} items",
                scores.len(),
                windows.len()
            )));
        }
        for (t, row) in chunk.iter().zip(scores.chunks(n)) {
            let excluded: &[u32] = if exclude_seen { &t.state } else { &[] };
            let rank = rank_of_target(row, t.action, excluded)?;
            let behavior = if t.reward >= PURCHASE_REWARD {
                Behavior::Purchase
            } else {
                Behavior::Click
            };
            ranks.push(behavior, rank);
        }
    }
    Ok(ranks)
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, sessions: &[Session], ks: &[usize], exclude_seen: bool) -> Result<MetricsReport> {
    Ok(evaluate_ranks(scorer, sessions, exclude_seen)?.report(ks))
}
