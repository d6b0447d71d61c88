use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::losses::{
    combined_policy_loss, policy_extraction_loss, reward_contrastive_loss, reward_label, td_targets,
    transition_infonce_loss, value_loss,
};
use super::nets::{PolicyNet, ValueNet};
use crate::autodiff::{AdamState, Array, Binding, ParamSet, Tape, Var};
use crate::data::{build_transitions, sample_negative_actions, BatchSampler, Session, StateWindow, Transition};
use crate::error::{Error, Result};

/// RNG streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `target <- sigma * online + (1 - sigma) * target`, element-wise.
pub fn polyak_update(target: &mut ParamSet, online: &ParamSet, sigma: f64) -> Result<()> {
    target.check_manifest(online)?;
    for (t, o) in target.iter_mut().zip(online.iter()) {
        for (tv, &ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = sigma * ov + (1.0 - sigma) * *tv;
        }
    }
    Ok(())
}

/// The three networks of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Nets {
    pub value: ValueNet,
    pub target: ValueNet,
    pub policy: PolicyNet,
}

impl Nets {
    /// The policy is drawn first so every variant starts from the same policy
    /// parameters for a given seed. The target starts as a copy of the value net.
    pub fn init(cfg: &TrainConfig, item_count: u32) -> Result<Self> {
        let mut rng = seeded_stream(cfg.seed, STREAM_INIT);
        let policy = PolicyNet::init(cfg.encoder, item_count, cfg.dim, &mut rng)?;
        let value = ValueNet::init(cfg.encoder, item_count, cfg.dim, &mut rng)?;
        let target = value.clone();
        Ok(Nets { value, target, policy })
    }
}

/// Per-step loss record; absent terms were not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value_loss: Option<f64>,
    pub policy_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transition_loss: Option<f64>,
    pub combined: f64,
    /// Mean extraction weight over the batch.
    pub mean_weight: f64,
    pub cosine_floor_hits: usize,
    pub elapsed_ms: f64,
}

impl StepReport {
    /// The report without its wall-clock field, for determinism checks.
    pub fn without_timing(&self) -> StepReport {
        StepReport {
            elapsed_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Training transitions plus the item set of each originating session.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub transitions: Vec<Transition>,
    pub session_items: Vec<Vec<u32>>,
    pub item_count: u32,
}

impl TrainData {
    pub fn new(sessions: &[Session], item_count: u32) -> Result<Self> {
        let transitions = build_transitions(sessions);
        if transitions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(TrainData {
            transitions,
            session_items: sessions.iter().map(Session::item_set).collect(),
            item_count,
        })
    }
}

#[derive(Serialize)]
struct BatchDump<'a> {
    states: Vec<&'a StateWindow>,
    actions: Vec<u32>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    negatives: &'a [Vec<u32>],
}

fn dump(batch: &[&Transition], negatives: &[Vec<u32>]) -> String {
    let d = BatchDump {
        states: batch.iter().map(|t| &t.state).collect(),
        actions: batch.iter().map(|t| t.action).collect(),
        rewards: batch.iter().map(|t| t.reward).collect(),
        terminal: batch.iter().map(|t| t.terminal).collect(),
        negatives,
    };
    serde_json::to_string(&d).unwrap_or_default()
}

/// Sequential trainer: per step one value update, one Polyak update, one
/// negative draw and one policy update, in that order.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Nets,
    value_opt: AdamState,
    policy_opt: AdamState,
    data: Arc<TrainData>,
    sampler: BatchSampler,
    batch_rng: ChaCha8Rng,
    negative_rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let nets = Nets::init(&cfg, data.item_count)?;
        let value_opt = AdamState::new(&nets.value.params, cfg.lr);
        let policy_opt = AdamState::new(&nets.policy.params, cfg.lr);
        let sampler = BatchSampler::new(data.transitions.len(), cfg.batch_size)?;
        Ok(Trainer {
            batch_rng: seeded_stream(cfg.seed, STREAM_BATCH),
            negative_rng: seeded_stream(cfg.seed, STREAM_NEGATIVES),
            cfg,
            nets,
            value_opt,
            policy_opt,
            data: Arc::new(data),
            sampler,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Draws the next mini-batch and runs one training step on it.
    pub fn step(&mut self) -> Result<StepReport> {
        let idx = self.sampler.next_indices(&mut self.batch_rng);
        let data = Arc::clone(&self.data);
        let batch: Vec<&Transition> = idx.iter().map(|&i| &data.transitions[i]).collect();
        self.step_on(&batch, &data)
    }

    fn non_finite(&self, component: &'static str, batch: &[&Transition], negatives: &[Vec<u32>]) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            component,
            dump: dump(batch, negatives),
        }
    }

    /// Turns numeric failures inside a loss into an abort carrying the batch.
    fn abort_on_numeric(&self, e: Error, component: &'static str, batch: &[&Transition], negatives: &[Vec<u32>]) -> Error {
        match e {
            Error::Numeric(_) => self.non_finite(component, batch, negatives),
            other => other,
        }
    }

    /// One training step on an explicit batch.
    pub fn step_on(&mut self, batch: &[&Transition], data: &TrainData) -> Result<StepReport> {
        let start = Instant::now();
        let cfg = self.cfg.clone();
        let flags = cfg.ablation;
        let states: Vec<StateWindow> = batch.iter().map(|t| t.state).collect();
        let next_states: Vec<StateWindow> = batch.iter().map(|t| t.next_state).collect();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let terminal: Vec<bool> = batch.iter().map(|t| t.terminal).collect();
        let b = batch.len();

        // (1) expectile value step, (2) Polyak update of the target.
        let mut value_loss_value = None;
        if !flags.no_value {
            let v_next = self.nets.target.values(&next_states)?;
            let targets = td_targets(&rewards, &terminal, &v_next, cfg.gamma);
            let mut tape = Tape::new();
            let p = self.nets.value.params.bind(&mut tape, true);
            let lv = self
                .nets
                .value
                .forward(&mut tape, &p, &states)
                .and_then(|v| value_loss(&mut tape, v, &targets, cfg.tau_exp))
                .map_err(|e| self.abort_on_numeric(e, "value", batch, &[]))?;
            let lv_value = tape.value(lv).item()?;
            if !lv_value.is_finite() {
                return Err(self.non_finite("value", batch, &[]));
            }
            tape.backward(lv)?;
            self.nets.value.params.accumulate_grads(&tape, &p);
            self.value_opt.step(&mut self.nets.value.params)?;
            polyak_update(&mut self.nets.target.params, &self.nets.value.params, cfg.polyak)?;
            value_loss_value = Some(lv_value);
        }

        // (3) negative actions.
        let m = cfg.effective_negatives();
        let mut negatives = Vec::with_capacity(if m > 0 { b } else { 0 });
        if m > 0 {
            for t in batch {
                let excluded = &data.session_items[t.session as usize];
                negatives.push(sample_negative_actions(excluded, m, data.item_count, &mut self.negative_rng)?);
            }
        }

        // (4) policy extraction with the updated target.
        let weights: Vec<f64> = if flags.no_value {
            vec![1.0; b]
        } else {
            let v_next = self.nets.target.values(&next_states)?;
            let mut w = td_targets(&rewards, &terminal, &v_next, cfg.gamma);
            if flags.clamp_weight {
                for x in &mut w {
                    *x = x.max(0.0);
                }
            }
            w
        };
        let mean_weight = weights.iter().sum::<f64>() / b as f64;

        let policy = &self.nets.policy;
        let z_next_fixed = if flags.uses_models() && !flags.no_transition_model && !flags.grad_through_zprime {
            Some(policy.encode_values(&next_states)?)
        } else {
            None
        };
        let actions: Vec<u32> = batch.iter().map(|t| t.action).collect();
        let pb = PolicyBatch {
            states: &states,
            next_states: &next_states,
            actions: &actions,
            rewards: &rewards,
            weights: &weights,
            negatives: &negatives,
        };
        let mut tape = Tape::new();
        let p = policy.params.bind(&mut tape, true);
        let terms = policy_objective(policy, &cfg, &mut tape, &p, &pb, z_next_fixed.as_ref())
            .map_err(|e| self.abort_on_numeric(e, "policy", batch, &negatives))?;
        let read = |v: Option<Var>| -> Result<Option<f64>> { v.map(|v| tape.value(v).item()).transpose() };
        let (pi_value, r_value, p_value) = (tape.value(terms.policy).item()?, read(terms.reward)?, read(terms.transition)?);
        let total = terms.total;
        let total_value = tape.value(total).item()?;
        for (name, v) in [
            ("policy", Some(pi_value)),
            ("reward", r_value),
            ("transition", p_value),
            ("combined", Some(total_value)),
        ] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(self.non_finite(name, batch, &negatives));
            }
        }
        tape.backward(total)?;
        self.nets.policy.params.accumulate_grads(&tape, &p);
        self.policy_opt.step(&mut self.nets.policy.params)?;

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            value_loss: value_loss_value,
            policy_loss: pi_value,
            reward_loss: r_value,
            transition_loss: p_value,
            combined: total_value,
            mean_weight,
            cosine_floor_hits: tape.cosine_floor_hits(),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Inputs of the policy-extraction objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct PolicyBatch<'a> {
    pub states: &'a [StateWindow],
    pub next_states: &'a [StateWindow],
    pub actions: &'a [u32],
    pub rewards: &'a [f64],
    /// Extraction weights, one per transition.
    pub weights: &'a [f64],
    /// `m` negatives per transition, or empty when no negatives are used.
    pub negatives: &'a [Vec<u32>],
}

/// Loss nodes of the policy objective.
#[derive(Clone, Copy, Debug)]
pub struct PolicyTerms {
    pub policy: Var,
    pub reward: Option<Var>,
    pub transition: Option<Var>,
    pub total: Var,
}

/// Builds `alpha * L_pi + L_r + L_p` on `tape` for the bound policy `p`.
///
/// `z_next_fixed` supplies next-state representations as constants; when it
/// is `None` they are encoded on the tape with `p`, so gradients flow
/// through them.
pub fn policy_objective(
    policy: &PolicyNet,
    cfg: &TrainConfig,
    tape: &mut Tape,
    p: &Binding,
    batch: &PolicyBatch<'_>,
    z_next_fixed: Option<&Array>,
) -> Result<PolicyTerms> {
    let flags = cfg.ablation;
    let b = batch.states.len();
    let z = policy.encode(tape, p, batch.states)?;
    let logits = policy.policy_logits(tape, p, z)?;
    let cols: Vec<usize> = batch.actions.iter().map(|&a| a as usize - 1).collect();
    let l_pi = policy_extraction_loss(tape, logits, &cols, batch.weights)?;

    let (mut l_r, mut l_p) = (None, None);
    if flags.uses_models() {
        let m = batch.negatives.first().map_or(0, Vec::len);
        let block = m + 1;
        let mut rows = Vec::with_capacity(b * block);
        let mut actions = Vec::with_capacity(b * block);
        for (i, &a) in batch.actions.iter().enumerate() {
            rows.push(i);
            actions.push(a);
            if m > 0 {
                rows.extend(std::iter::repeat_n(i, m));
                actions.extend_from_slice(&batch.negatives[i]);
            }
        }
        let pairs = policy.pair_features(tape, p, z, &rows, &actions)?;
        let reweight = flags.reward_reweight.then_some(batch.rewards);
        if !flags.no_reward_model {
            let labels: Vec<usize> = batch.rewards.iter().map(|&r| reward_label(r)).collect();
            let logits = policy.reward_logits(tape, p, pairs)?;
            l_r = Some(reward_contrastive_loss(tape, logits, &labels, m, reweight)?);
        }
        if !flags.no_transition_model {
            let predicted = policy.predict_next(tape, p, pairs)?;
            let z_next = match z_next_fixed {
                Some(a) => tape.constant(a.clone()),
                None => policy.encode(tape, p, batch.next_states)?,
            };
            let z_next = tape.gather_rows(z_next, &rows)?;
            let sims = tape.cosine_similarity(predicted, z_next)?;
            l_p = Some(transition_infonce_loss(tape, sims, b, m, cfg.tau_temp, reweight)?);
        }
    }
    let total = combined_policy_loss(tape, cfg.alpha, l_pi, l_r, l_p)?;
    Ok(PolicyTerms {
        policy: l_pi,
        reward: l_r,
        transition: l_p,
        total,
    })
}
