//! JSON bodies of the REST API, shared by the server, the client and the
//! remote-delegate backend.

use std::collections::{BTreeMap, BTreeSet};

use conductor_core::{BackendDescriptor, BridgeSpec, EntryState, EventState, Literal, ServiceSpec};
use serde::{Deserialize, Serialize};

use crate::backends::MockScripts;
use crate::records::{Endpoint, ServiceStatus};

/// Shown in place of secret input values.
pub const REDACTED: &str = "<redacted>";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StartRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<BTreeMap<String, Literal>>,
    /// Adds the entry to an existing event instead of creating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
    /// Pre-rendered environment, used by a parent engine delegating a launch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret_env: Option<BTreeSet<String>>,
    /// Idempotency key: a repeated start with the same key returns the
    /// original event and entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_ref: Option<String>,
}

/// Body of `POST /events/{id}/services`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddEntryRequest {
    pub service: String,
    #[serde(flatten)]
    pub start: StartRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartResponse {
    pub event_id: String,
    pub entry_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryView {
    pub id: String,
    pub service: String,
    pub version: String,
    pub state: EntryState,
    #[serde(default)]
    pub exhausted: bool,
    pub url: Option<String>,
    pub hostname: Option<String>,
    pub endpoint: Option<Endpoint>,
    pub backend_id: Option<String>,
    pub restart_count: u32,
    pub last_error: Option<String>,
    #[serde(default)]
    pub inputs: BTreeMap<String, Literal>,
    #[serde(default)]
    pub depends_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventView {
    pub id: String,
    pub state: EventState,
    pub owner: String,
    pub members: Vec<String>,
    pub created_at: u64,
    pub entries: Vec<EntryView>,
    #[serde(default)]
    pub bridges: Vec<BridgeSpec>,
}

impl EventView {
    pub fn entry(&self, id: &str) -> Option<&EntryView> {
        self.entries.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareRequest {
    pub subject: String,
    /// Defaults to the caller's provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub event_id: String,
    pub token: String,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceView {
    pub name: String,
    pub version: String,
    pub status: ServiceStatus,
    pub registered_at: u64,
    pub live_entry_count: u32,
    pub spec: ServiceSpec,
}

/// Body of `POST /backends`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRegistration {
    #[serde(flatten)]
    pub descriptor: BackendDescriptor,
    /// Service credential a remote delegate presents to its child engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential: Option<String>,
    /// Probe scripts for a mock backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripts: Option<MockScripts>,
}

/// One agent-facing tool description per active service version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub version: String,
    pub description: String,
    pub input_schema: serde_json::Value,
    pub output_schema: serde_json::Value,
    pub invoke_hint: String,
}
