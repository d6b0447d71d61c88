use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::transitions::Transition;
use crate::error::{Error, Result};

/// Mini-batch of transitions plus the sampled negative actions of each row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    pub negatives: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Uniform sampling without replacement inside each epoch; the order is
/// reshuffled whenever an epoch is exhausted.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Sampling("no training transitions".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(BatchSampler {
            order: (0..len).collect(),
            pos: len,
            batch_size,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Indices of the next batch; the last batch of an epoch may be smaller.
    pub fn next_indices(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    pub fn next_batch(&mut self, transitions: &[Transition], rng: &mut ChaCha8Rng) -> Batch {
        let idx = self.next_indices(rng);
        Batch {
            transitions: idx.iter().map(|&i| transitions[i].clone()).collect(),
            negatives: Vec::new(),
        }
    }
}

/// Draws `m` items uniformly from `[1, item_count]` minus `excluded`
/// (sorted, deduplicated session items). Repeats among the draws are allowed.
pub fn sample_negative_actions(excluded: &[u32], m: usize, item_count: u32, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let blocked = excluded.iter().filter(|&&i| i >= 1 && i <= item_count).count();
    if blocked >= item_count as usize {
        return Err(Error::Sampling(format!(
            "no eligible negatives: all {item_count} items occur in the session"
        )));
    }
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let cand = rng.gen_range(1..=item_count);
        if excluded.binary_search(&cand).is_err() {
            out.push(cand);
        }
    }
    Ok(out)
}
