//! Per-service concurrency counters.

use serde::{Deserialize, Serialize};

use crate::model::Limit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "reason")]
pub enum Admission {
    Admit,
    Reject(&'static str),
}

/// Counts live (non-terminal) entries against a concurrency limit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuotaCounter {
    pub limit: Limit,
    pub live: u32,
}

impl QuotaCounter {
    pub fn new(limit: Limit) -> Self {
        Self { limit, live: 0 }
    }

    /// Check-and-increment.
    pub fn admit(&mut self) -> Admission {
        match self.limit {
            Limit::Finite(max) if self.live >= max => Admission::Reject("quota"),
            _ => {
                self.live += 1;
                Admission::Admit
            }
        }
    }

    pub fn release(&mut self) {
        self.live = self.live.saturating_sub(1);
    }
}
