//! Model-enhanced contrastive RL: expectile value learning with a Polyak
//! target, contrastive reward and transition heads, and value-weighted
//! policy extraction.

mod checkpoint;
mod config;
mod losses;
mod nets;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, read_checkpoint, read_header, write_checkpoint, CheckpointHeader, TensorEntry,
    CHECKPOINT_MAGIC,
};
pub use config::{Ablation, TrainConfig};
pub use losses::{
    combined_policy_loss, expectile_loss, policy_extraction_loss, reward_contrastive_loss, reward_label, td_targets,
    transition_infonce_loss, value_loss,
};
pub use nets::{Linear, Mlp, PolicyNet, ValueNet, REWARD_CLICK, REWARD_NEGATIVE, REWARD_PURCHASE};
pub use train::{
    policy_objective, polyak_update, seeded_stream, Nets, PolicyBatch, PolicyTerms, StepReport, TrainData, Trainer,
};
