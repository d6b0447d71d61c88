use super::events::Behavior;
use super::split::Session;

/// Number of most recent items forming a state.
pub const WINDOW: usize = 10;

/// Padding item id.
pub const PAD: u32 = 0;

pub const CLICK_REWARD: f64 = 0.2;
pub const PURCHASE_REWARD: f64 = 1.0;

pub type StateWindow = [u32; WINDOW];

pub fn reward_for(behavior: Behavior) -> f64 {
    match behavior {
        Behavior::Click => CLICK_REWARD,
        Behavior::Purchase => PURCHASE_REWARD,
    }
}

/// Last `WINDOW` items of `prefix`, left-padded with [`PAD`] so the most
/// recent item sits in the final slot.
pub fn state_window(prefix: &[u32]) -> StateWindow {
    let mut w = [PAD; WINDOW];
    let take = prefix.len().min(WINDOW);
    w[WINDOW - take..].copy_from_slice(&prefix[prefix.len() - take..]);
    w
}

/// One step `(s, a, r, s')` of a session episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: StateWindow,
    pub action: u32,
    pub reward: f64,
    pub next_state: StateWindow,
    pub terminal: bool,
    /// Index of the originating session within its split.
    pub session: u32,
}

/// One transition per consecutive pair of events; the first event of a
/// session has no state and yields none.
pub fn session_transitions(session: &Session, session_index: u32) -> Vec<Transition> {
    let n = session.len();
    (1..n)
        .map(|t| Transition {
            state: state_window(&session.items[..t]),
            action: session.items[t],
            reward: reward_for(session.behaviors[t]),
            next_state: state_window(&session.items[..=t]),
            terminal: t + 1 == n,
            session: session_index,
        })
        .collect()
}

pub fn build_transitions(sessions: &[Session]) -> Vec<Transition> {
    sessions
        .iter()
        .enumerate()
        .flat_map(|(i, s)| session_transitions(s, i as u32))
        .collect()
}
