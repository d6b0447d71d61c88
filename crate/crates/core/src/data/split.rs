use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::events::{Behavior, InteractionEvent};
use crate::error::{Error, Result};

/// A time-ordered session with dense item ids in `[1, item_count]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub items: Vec<u32>,
    pub behaviors: Vec<Behavior>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sorted, deduplicated item ids of the session.
    pub fn item_set(&self) -> Vec<u32> {
        let mut s = self.items.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
    pub item_count: u32,
    /// `remap[i]` is the raw id of dense item `i + 1`.
    pub remap: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl DatasetSplit {
    pub fn sessions(&self, which: SplitName) -> &[Session] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn all_sessions(&self) -> impl Iterator<Item = &Session> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn stats(&self) -> DatasetStats {
        let mut st = DatasetStats {
            sessions: 0,
            items: self.item_count as usize,
            clicks: 0,
            purchases: 0,
        };
        for s in self.all_sessions() {
            st.sessions += 1;
            for b in &s.behaviors {
                match b {
                    Behavior::Click => st.clicks += 1,
                    Behavior::Purchase => st.purchases += 1,
                }
            }
        }
        st
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sessions: usize,
    pub items: usize,
    pub clicks: usize,
    pub purchases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub min_item_freq: usize,
    pub min_session_len: usize,
    pub ratios: [u32; 3],
    pub seed: u64,
    /// Keep a seeded random subset of this many sessions before filtering.
    pub sample_sessions: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            min_item_freq: 3,
            min_session_len: 3,
            ratios: [8, 1, 1],
            seed: 0,
            sample_sessions: None,
        }
    }
}

type RawSession = Vec<(u64, Behavior)>;

/// Groups events (already ordered by session and time) into raw sessions.
pub fn group_sessions(events: &[InteractionEvent]) -> Vec<RawSession> {
    let mut out: Vec<RawSession> = Vec::new();
    let mut current: Option<&str> = None;
    for e in events {
        if current != Some(e.session_id.as_str()) {
            out.push(Vec::new());
            current = Some(&e.session_id);
        }
        out.last_mut().expect("pushed above").push((e.item_id, e.behavior));
    }
    out
}

/// Alternately drops rare items and short sessions until neither changes.
pub fn filter_to_fixed_point(mut sessions: Vec<RawSession>, min_item_freq: usize, min_session_len: usize) -> Vec<RawSession> {
    loop {
        let mut freq: HashMap<u64, usize> = HashMap::new();
        for s in &sessions {
            for &(item, _) in s {
                *freq.entry(item).or_default() += 1;
            }
        }
        let before: usize = sessions.iter().map(Vec::len).sum::<usize>() + sessions.len();
        for s in &mut sessions {
            s.retain(|(item, _)| freq[item] >= min_item_freq);
        }
        sessions.retain(|s| s.len() >= min_session_len);
        let after: usize = sessions.iter().map(Vec::len).sum::<usize>() + sessions.len();
        if after == before {
            return sessions;
        }
    }
}

/// Filters, shuffles with `cfg.seed`, splits by session and remaps items to
/// dense ids ordered by raw id.
pub fn filter_and_split(events: &[InteractionEvent], cfg: &SplitConfig) -> Result<DatasetSplit> {
    let total: u32 = cfg.ratios.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sessions = group_sessions(events);
    if let Some(k) = cfg.sample_sessions {
        if k < sessions.len() {
            sessions.shuffle(&mut rng);
            sessions.truncate(k);
        }
    }
    let mut sessions = filter_to_fixed_point(sessions, cfg.min_item_freq, cfg.min_session_len);
    if sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let items: BTreeSet<u64> = sessions.iter().flatten().map(|&(i, _)| i).collect();
    let dense: BTreeMap<u64, u32> = items.iter().enumerate().map(|(i, &raw)| (raw, i as u32 + 1)).collect();
    sessions.shuffle(&mut rng);

    let n = sessions.len();
    let n_train = n * cfg.ratios[0] as usize / total as usize;
    let n_val = n * cfg.ratios[1] as usize / total as usize;
    let to_session = |raw: RawSession| Session {
        items: raw.iter().map(|(i, _)| dense[i]).collect(),
        behaviors: raw.iter().map(|&(_, b)| b).collect(),
    };
    let mut iter = sessions.into_iter().map(to_session);
    let train: Vec<Session> = iter.by_ref().take(n_train).collect();
    let validation: Vec<Session> = iter.by_ref().take(n_val).collect();
    let test: Vec<Session> = iter.collect();
    Ok(DatasetSplit {
        train,
        validation,
        test,
        item_count: items.len() as u32,
        remap: items.into_iter().collect(),
    })
}
