//! Execution backends.
//!
//! Every backend implements the same three-call contract: `provision` a
//! launch payload, `probe` the resulting handle, `teardown` it. Provisioning
//! is idempotent per `(entry_id, attempt)` so a recovering engine can repeat
//! a call whose result it never recorded without starting a second workload.

use async_trait::async_trait;
use conductor_core::{LaunchPayload, Resources};
use serde::{Deserialize, Serialize};

use crate::records::Endpoint;

mod local;
mod mock;
mod remote;

pub use local::{LocalProcessBackend, RunMeta};
pub use mock::{MockBackend, MockScripts};
pub use remote::RemoteDelegateBackend;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionHandle {
    pub backend_id: String,
    pub entry_id: String,
    pub native_ref: String,
    pub endpoint: Option<Endpoint>,
    #[serde(default)]
    pub sidecar_refs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Starting,
    Running,
    ExitedOk,
    Crashed,
    Unknown,
}

impl Phase {
    /// Crashed and exited are final for a handle.
    pub fn is_final(self) -> bool {
        matches!(self, Phase::Crashed | Phase::ExitedOk)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub phase: Phase,
    pub detail: String,
    pub observed_at: u64,
    /// Set when the backend learns the endpoint after provisioning
    /// (remote delegates report it once the child has placed the entry).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Endpoint>,
}

impl Observation {
    pub fn new(phase: Phase, detail: impl Into<String>, observed_at: u64) -> Self {
        Self {
            phase,
            detail: detail.into(),
            observed_at,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("launch failed: {0}")]
    LaunchFailed(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown handle {0}")]
    UnknownHandle(String),
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    async fn provision(&self, payload: &LaunchPayload) -> Result<ProvisionHandle, BackendError>;

    async fn probe(&self, handle: &ProvisionHandle) -> Result<Observation, BackendError>;

    /// Best effort and idempotent. Afterwards `probe` reports `Unknown`.
    async fn teardown(&self, handle: &ProvisionHandle);

    /// Aggregate capacity advertised by the backend itself, if it has an opinion.
    async fn advertised_capacity(&self) -> Option<Resources> {
        None
    }

    /// Stops tracking workloads without stopping them, so that a later engine
    /// instance can take them over.
    fn release(&self) {}
}
