use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderKind, DEFAULT_DIM};
use crate::error::{Error, Result};

/// Switches for ablations and deviation knobs; all off is full MCRL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Skip value learning and use weight 1 in policy extraction.
    pub no_value: bool,
    pub no_reward_model: bool,
    pub no_transition_model: bool,
    /// Train the reward and transition heads on positive pairs only.
    pub no_contrastive: bool,
    /// Scale the positive reward-head term and the transition term by `r`.
    pub reward_reweight: bool,
    /// Clamp the extraction weight at zero.
    pub clamp_weight: bool,
    /// Let gradients flow into the next-state representation.
    pub grad_through_zprime: bool,
}

impl Ablation {
    /// Named variants: `mcrl`, `none`, `reward`, `state`, `wocl`, `supervised`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Ablation::default();
        Ok(match name {
            "mcrl" => base,
            "none" => Ablation {
                no_reward_model: true,
                no_transition_model: true,
                ..base
            },
            "reward" => Ablation {
                no_transition_model: true,
                ..base
            },
            "state" => Ablation {
                no_reward_model: true,
                ..base
            },
            "wocl" => Ablation {
                no_contrastive: true,
                ..base
            },
            "supervised" => Ablation {
                no_value: true,
                no_reward_model: true,
                no_transition_model: true,
                ..base
            },
            other => return Err(Error::Config(format!("unknown variant {other:?}"))),
        })
    }

    pub fn uses_models(&self) -> bool {
        !(self.no_reward_model && self.no_transition_model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau_exp: f64,
    pub tau_temp: f64,
    pub alpha: f64,
    /// Negative actions per transition.
    pub negatives: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Polyak rate of the target value network.
    pub polyak: f64,
    pub steps: u64,
    pub seed: u64,
    pub dim: usize,
    pub encoder: EncoderKind,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            tau_exp: 0.7,
            tau_temp: 1.0,
            alpha: 1.0,
            negatives: 30,
            batch_size: 256,
            lr: 0.005,
            polyak: 0.005,
            steps: 1000,
            seed: 0,
            dim: DEFAULT_DIM,
            encoder: EncoderKind::Gru,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.tau_exp > 0.0 && self.tau_exp < 1.0) {
            return bad(format!("tau_exp {} outside (0, 1)", self.tau_exp));
        }
        if !(self.tau_temp > 0.0) {
            return bad(format!("tau_temp {} must be positive", self.tau_temp));
        }
        if self.negatives == 0 && !self.ablation.no_contrastive && self.ablation.uses_models() {
            return bad("at least one negative action is required".into());
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad(format!("polyak rate {} outside (0, 1]", self.polyak));
        }
        if self.batch_size == 0 || self.dim == 0 {
            return bad("batch size and dimension must be positive".into());
        }
        if !(self.lr > 0.0) || !self.alpha.is_finite() {
            return bad("learning rate must be positive and alpha finite".into());
        }
        Ok(())
    }

    /// Negatives actually drawn per transition under the current flags.
    pub fn effective_negatives(&self) -> usize {
        if self.ablation.no_contrastive || !self.ablation.uses_models() {
            0
        } else {
            self.negatives
        }
    }
}
