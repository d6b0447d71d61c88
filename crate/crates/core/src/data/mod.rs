//! Interaction logs, session filtering and splitting, MDP transitions and
//! batch sampling.

mod cache;
mod events;
mod sampling;
mod split;
mod synth;
mod transitions;

pub use cache::{DatasetCache, CACHE_MAGIC};
pub use events::{parse_events, write_events, Behavior, Columns, FormatSpec, HeaderMode, InteractionEvent};
pub use sampling::{sample_negative_actions, Batch, BatchSampler};
pub use split::{filter_and_split, filter_to_fixed_point, group_sessions, DatasetSplit, DatasetStats, Session, SplitConfig, SplitName};
pub use synth::{SynthConfig, SynthWorld};
pub use transitions::{
    build_transitions, reward_for, session_transitions, state_window, StateWindow, Transition, CLICK_REWARD, PAD,
    PURCHASE_REWARD, WINDOW,
};
