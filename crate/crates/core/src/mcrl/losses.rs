//! Loss terms as tape functions over already-computed network outputs, so
//! they can be checked against hand computations in isolation.

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};

use super::nets::{REWARD_CLICK, REWARD_NEGATIVE, REWARD_PURCHASE};
use crate::data::PURCHASE_REWARD;

/// `|tau - 1(u < 0)| * u^2` for a scalar.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    crate::autodiff::expectile_weight(u, tau) * u * u
}

/// Bootstrapped targets `r + gamma * (1 - done) * v_next`.
pub fn td_targets(rewards: &[f64], terminal: &[bool], v_next: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(terminal)
        .zip(v_next)
        .map(|((&r, &done), &v)| if done { r } else { r + gamma * v })
        .collect()
}

/// Mean expectile loss of `targets - v`; `targets` are constants.
pub fn value_loss(tape: &mut Tape, v: Var, targets: &[f64], tau: f64) -> Result<Var> {
    let t = tape.constant(Array::vector(targets.to_vec()));
    let u = tape.sub(t, v)?;
    let l = tape.expectile(u, tau);
    tape.mean(l)
}

/// Reward-head class of an observed action with reward `r`.
pub fn reward_label(r: f64) -> usize {
    if r >= PURCHASE_REWARD {
        REWARD_PURCHASE
    } else {
        REWARD_CLICK
    }
}

fn check_blocks(tape: &Tape, x: Var, batch: usize, block: usize, what: &str) -> Result<()> {
    if tape.value(x).shape()[0] != batch * block {
        return Err(Error::Shape(format!(
            "{what}: {:?} rows for {batch} transitions of {block} pairs",
            tape.value(x).shape()
        )));
    }
    Ok(())
}

/// Per-pair coefficients: `weights[i]` on each transition's positive pair,
/// 1 on negatives.
fn pair_coefficients(batch: usize, block: usize, weights: Option<&[f64]>) -> Vec<f64> {
    let mut c = vec![1.0; batch * block];
    if let Some(w) = weights {
        for i in 0..batch {
            c[i * block] = w[i];
        }
    }
    c
}

/// Contrastive reward-head loss.
///
/// `logits` holds `1 + m` rows per transition, positive first; the positive
/// row is labelled by `labels`, negatives by the negative class. Cross
/// entropies are summed per transition and averaged over transitions.
pub fn reward_contrastive_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    m: usize,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let b = labels.len();
    let block = m + 1;
    check_blocks(tape, logits, b, block, "reward loss")?;
    let mut targets = vec![REWARD_NEGATIVE; b * block];
    for (i, &l) in labels.iter().enumerate() {
        targets[i * block] = l;
    }
    let ce = tape.cross_entropy_rows(logits, &targets)?;
    let ce = match weights {
        Some(_) => {
            let c = tape.constant(Array::vector(pair_coefficients(b, block, weights)));
            tape.mul(c, ce)?
        }
        None => ce,
    };
    let total = tape.sum(ce);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// InfoNCE over cosine similarities `sims` `[B * (1 + m)]`, positive first.
///
/// With `m = 0` the softmax is degenerate, so the positive-only objective
/// `-sim / tau_temp` is used instead.
pub fn transition_infonce_loss(
    tape: &mut Tape,
    sims: Var,
    batch: usize,
    m: usize,
    tau_temp: f64,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let block = m + 1;
    check_blocks(tape, sims, batch, block, "transition loss")?;
    let per = if m == 0 {
        tape.scale(sims, -1.0 / tau_temp)
    } else {
        let s = tape.reshape(sims, &[batch, block])?;
        let s = tape.scale(s, 1.0 / tau_temp);
        tape.cross_entropy_rows(s, &vec![0; batch])?
    };
    let per = match weights {
        Some(w) => {
            let c = tape.constant(Array::vector(w.to_vec()));
            tape.mul(c, per)?
        }
        None => per,
    };
    let total = tape.sum(per);
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// Value-weighted extraction loss `mean(-w * log pi(a|s))`.
///
/// `logits` is `[B, |I|]` and `action_cols` the 0-based logit columns of the
/// observed actions.
pub fn policy_extraction_loss(tape: &mut Tape, logits: Var, action_cols: &[usize], weights: &[f64]) -> Result<Var> {
    let ce = tape.cross_entropy_rows(logits, action_cols)?;
    let w = tape.constant(Array::vector(weights.to_vec()));
    let wce = tape.mul(w, ce)?;
    tape.mean(wce)
}

/// `alpha * l_pi + l_r + l_p`, with absent model terms omitted.
pub fn combined_policy_loss(tape: &mut Tape, alpha: f64, l_pi: Var, l_r: Option<Var>, l_p: Option<Var>) -> Result<Var> {
    let mut total = tape.scale(l_pi, alpha);
    for term in [l_r, l_p].into_iter().flatten() {
        total = tape.add(total, term)?;
    }
    Ok(total)
}
