//! Persistent records shared by the store, the engine and the API.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use conductor_core::{
    BridgeSpec, EntryCondition, EntryState, EventAcl, EventState, Identity, Literal, ServiceRef,
    ServiceSpec,
};
use serde::{Deserialize, Serialize};

use crate::backends::ProvisionHandle;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self {
            host: host.into(),
            port,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceStatus {
    Active,
    Deprecated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredService {
    pub spec: ServiceSpec,
    pub status: ServiceStatus,
    pub registered_at: u64,
}

impl StoredService {
    pub fn key(&self) -> String {
        service_key(&self.spec.name, &self.spec.version)
    }
}

pub fn service_key(name: &str, version: &str) -> String {
    format!("{name}@{version}")
}

/// What an entry's payload is rendered from. Secret values never appear
/// here; the engine keeps them in memory only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum LaunchSource {
    Inputs {
        inputs: BTreeMap<String, Literal>,
        /// Names of `secret` inputs supplied at launch; their values are withheld.
        #[serde(default)]
        secret_inputs: BTreeSet<String>,
    },
    /// Pre-rendered environment from a parent engine.
    Env {
        env: BTreeMap<String, String>,
        secret_env: BTreeSet<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub id: String,
    pub event_id: String,
    pub service: ServiceRef,
    pub backend_id: Option<String>,
    pub state: EntryState,
    pub endpoint: Option<Endpoint>,
    pub hostname: Option<String>,
    pub restart_count: u32,
    pub payload_digest: Option<String>,
    pub last_transition_at: u64,
    pub created_at: u64,
    /// A `Failed` entry with no restart left.
    #[serde(default)]
    pub exhausted: bool,
    #[serde(default)]
    pub running_since: Option<u64>,
    #[serde(default)]
    pub handle: Option<ProvisionHandle>,
    pub launch: LaunchSource,
    /// Sibling entries this entry consumes, found through url inputs.
    #[serde(default)]
    pub depends_on: Vec<String>,
    #[serde(default)]
    pub last_error: Option<String>,
    /// Caller-supplied idempotency key (used by parent engines).
    #[serde(default)]
    pub client_ref: Option<String>,
}

impl EntryRecord {
    pub fn condition(&self) -> EntryCondition {
        EntryCondition {
            state: self.state,
            exhausted: self.exhausted,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.condition().is_terminal()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    pub owner: Identity,
    pub acl: EventAcl,
    pub entries: Vec<String>,
    pub state: EventState,
    pub created_at: u64,
    /// Expiry of the event's entry-injection token. The token itself is
    /// re-derived from the signing key and never stored.
    pub token_expires_at: u64,
    #[serde(default)]
    pub bridges: Vec<BridgeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteBinding {
    pub hostname: String,
    /// `None` until the entry's endpoint is known.
    pub target: Option<Endpoint>,
    pub event_id: String,
    pub entry_id: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionLogRecord {
    pub seq: u64,
    pub ts: u64,
    pub event_id: String,
    pub entry_id: Option<String>,
    pub from: EntryState,
    pub to: EntryState,
    pub reason: String,
}
