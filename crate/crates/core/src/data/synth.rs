//! Synthetic click/purchase logs with planted Markov next-item structure.
//!
//! Every item has a fixed list of `branching` successors with slowly
//! decaying weights. A session starts at a uniform item and then follows the
//! successor list with probability `follow_prob`, jumping uniformly
//! otherwise. A `buyable_fraction` of the catalog is purchased
//! `buyable_lift` times more often than the rest; the two purchase
//! probabilities are set so the overall rate matches `purchase_rate` under a
//! uniform item distribution.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::events::{Behavior, InteractionEvent};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub items: u32,
    pub sessions: usize,
    pub purchase_rate: f64,
    pub branching: usize,
    pub follow_prob: f64,
    pub buyable_fraction: f64,
    pub buyable_lift: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            items: 200,
            sessions: 5000,
            purchase_rate: 0.05,
            branching: 20,
            follow_prob: 0.9,
            buyable_fraction: 0.2,
            buyable_lift: 4.0,
            min_len: 3,
            max_len: 15,
            seed: 0,
        }
    }
}

/// Planted structure of a generated log, kept for tests and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    /// `successors[i - 1]` lists the successors of item `i` in weight order.
    pub successors: Vec<Vec<u32>>,
    pub weights: Vec<f64>,
    /// Purchase probability of item `i` at index `i - 1`.
    pub purchase_prob: Vec<f64>,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.items < 2 {
            return bad("need at least two items");
        }
        if self.branching == 0 || self.branching >= self.items as usize {
            return bad("branching must lie in [1, items)");
        }
        if !(0.0..=1.0).contains(&self.purchase_rate) || !(0.0..=1.0).contains(&self.follow_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.buyable_fraction) || self.buyable_lift < 1.0 {
            return bad("buyable_fraction in [0, 1] and buyable_lift >= 1 required");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        Ok(())
    }

    pub fn world(&self, rng: &mut ChaCha8Rng) -> Result<SynthWorld> {
        self.validate()?;
        let n = self.items as usize;
        let successors = (0..n)
            .map(|i| {
                // Distinct successors other than the item itself.
                sample(rng, n - 1, self.branching)
                    .into_iter()
                    .map(|j| if j >= i { j + 2 } else { j + 1 } as u32)
                    .collect()
            })
            .collect();
        let weights = (0..self.branching).map(|j| 1.0 / (1.0 + 0.15 * j as f64)).collect();
        let n_buy = (self.buyable_fraction * n as f64).round() as usize;
        let buyable: Vec<usize> = sample(rng, n, n_buy).into_vec();
        let frac = n_buy as f64 / n as f64;
        let p_hi = (self.buyable_lift * self.purchase_rate).min(1.0);
        let p_lo = if frac < 1.0 {
            ((self.purchase_rate - frac * p_hi) / (1.0 - frac)).max(0.0)
        } else {
            p_hi
        };
        let mut purchase_prob = vec![if n_buy == 0 { self.purchase_rate } else { p_lo }; n];
        for i in buyable {
            purchase_prob[i] = p_hi;
        }
        Ok(SynthWorld {
            successors,
            weights,
            purchase_prob,
        })
    }

    /// Generates the event log; session ids are `0..sessions`.
    pub fn generate(&self) -> Result<(Vec<InteractionEvent>, SynthWorld)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let world = self.world(&mut rng)?;
        let total_w: f64 = world.weights.iter().sum();
        let mut events = Vec::new();
        let mut clock: i64 = 0;
        for s in 0..self.sessions {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let mut item = rng.gen_range(1..=self.items);
            for _ in 0..len {
                let behavior = if rng.gen_bool(world.purchase_prob[item as usize - 1]) {
                    Behavior::Purchase
                } else {
                    Behavior::Click
                };
                events.push(InteractionEvent {
                    session_id: s.to_string(),
                    timestamp: clock,
                    item_id: item as u64,
                    behavior,
                });
                clock += 1;
                item = if rng.gen_bool(self.follow_prob) {
                    let mut u = rng.gen_range(0.0..total_w);
                    let succ = &world.successors[item as usize - 1];
                    let mut pick = succ[succ.len() - 1];
                    for (j, &w) in world.weights.iter().enumerate() {
                        if u < w {
                            pick = succ[j];
                            break;
                        }
                        u -= w;
                    }
                    pick
                } else {
                    rng.gen_range(1..=self.items)
                };
            }
        }
        Ok((events, world))
    }
}
