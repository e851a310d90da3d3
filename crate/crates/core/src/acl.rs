//! Identities and event-scoped access control lists.

use alloc::collections::BTreeSet;
use alloc::string::String;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

/// A verified principal. Equality and ordering use `(provider, subject)` only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Identity {
    pub subject: String,
    pub provider: String,
    #[serde(default)]
    pub display_name: String,
}

impl Identity {
    pub fn new(provider: &str, subject: &str, display_name: &str) -> Self {
        Self {
            subject: subject.into(),
            provider: provider.into(),
            display_name: display_name.into(),
        }
    }

    fn key(&self) -> (&str, &str) {
        (&self.provider, &self.subject)
    }
}

impl PartialEq for Identity {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Identity {}

impl PartialOrd for Identity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Identity {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.provider, self.subject)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0} is not a member of this event")]
pub struct NotAMember(pub String);

/// Members of an event. The owner is always a member and cannot be removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventAcl {
    pub owner: Identity,
    pub members: BTreeSet<Identity>,
}

impl EventAcl {
    pub fn new(owner: Identity) -> Self {
        let members = BTreeSet::from([owner.clone()]);
        Self { owner, members }
    }

    pub fn authorize(&self, identity: &Identity) -> Decision {
        if self.members.contains(identity) {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    /// Any member may add another identity.
    pub fn share(&mut self, target: Identity, caller: &Identity) -> Result<(), NotAMember> {
        if self.authorize(caller) == Decision::Deny {
            return Err(NotAMember(alloc::format!("{caller}")));
        }
        self.members.insert(target);
        Ok(())
    }
}
