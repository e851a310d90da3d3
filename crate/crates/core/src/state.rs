//! Entry state machine and event state derivation.

use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntryState {
    Pending,
    Routing,
    Provisioning,
    Starting,
    Running,
    Restarting,
    Stopped,
    Failed,
    Terminated,
}

impl EntryState {
    pub const ALL: [EntryState; 9] = [
        EntryState::Pending,
        EntryState::Routing,
        EntryState::Provisioning,
        EntryState::Starting,
        EntryState::Running,
        EntryState::Restarting,
        EntryState::Stopped,
        EntryState::Failed,
        EntryState::Terminated,
    ];

    /// States in which an entry may carry a live endpoint.
    pub fn has_endpoint(self) -> bool {
        matches!(
            self,
            EntryState::Starting | EntryState::Running | EntryState::Restarting
        )
    }
}

impl fmt::Display for EntryState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventState {
    Requested,
    Active,
    Degraded,
    Completed,
    Failed,
    Terminated,
}

impl fmt::Display for EventState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// An entry state plus whether a `Failed` entry has no restarts left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntryCondition {
    pub state: EntryState,
    pub exhausted: bool,
}

impl EntryCondition {
    pub const fn live(state: EntryState) -> Self {
        Self {
            state,
            exhausted: false,
        }
    }

    pub const fn failed_exhausted() -> Self {
        Self {
            state: EntryState::Failed,
            exhausted: true,
        }
    }

    pub fn is_failed_exhausted(self) -> bool {
        self.state == EntryState::Failed && self.exhausted
    }

    /// Stopped, Terminated, and Failed with no restarts left.
    pub fn is_terminal(self) -> bool {
        match self.state {
            EntryState::Stopped | EntryState::Terminated => true,
            EntryState::Failed => self.exhausted,
            _ => false,
        }
    }
}

/// Whether `from -> to` is a legal entry transition.
///
/// `restarts_left` only matters for `Failed -> Restarting`.
pub fn is_legal_transition(from: EntryState, to: EntryState, restarts_left: bool) -> bool {
    use EntryState::*;
    match (from, to) {
        (Pending, Routing)
        | (Routing, Provisioning | Failed)
        | (Provisioning, Starting | Failed)
        | (Starting, Running | Failed)
        | (Running, Stopped | Failed)
        | (Restarting, Provisioning) => true,
        (Failed, Restarting) => restarts_left,
        // Stopped -> Terminated covers ttl expiry, Failed -> Terminated covers
        // explicit teardown of an exhausted entry.
        (Terminated, _) => false,
        (_, Terminated) => true,
        _ => false,
    }
}

/// Derives an event's state from its entries by fixed priority rules.
pub fn derive_event_state<I>(entries: I) -> EventState
where
    I: IntoIterator<Item = EntryCondition>,
{
    let mut count = 0usize;
    let mut terminated = 0usize;
    let mut terminal = 0usize;
    let mut failed_exhausted = 0usize;
    let mut running = 0usize;
    for cond in entries {
        count += 1;
        if cond.state == EntryState::Terminated {
            terminated += 1;
        }
        if cond.is_terminal() {
            terminal += 1;
        }
        if cond.is_failed_exhausted() {
            failed_exhausted += 1;
        }
        if cond.state == EntryState::Running {
            running += 1;
        }
    }
    let non_terminal = count - terminal;

    if count == 0 {
        EventState::Requested
    } else if terminated == count {
        EventState::Terminated
    } else if failed_exhausted > 0 && non_terminal > 0 {
        EventState::Degraded
    } else if non_terminal == 0 && failed_exhausted > 0 {
        EventState::Failed
    } else if non_terminal == 0 {
        EventState::Completed
    } else if running > 0 && failed_exhausted == 0 {
        EventState::Active
    } else {
        EventState::Requested
    }
}
