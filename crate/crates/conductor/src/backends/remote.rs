use std::sync::Arc;

use async_trait::async_trait;
use conductor_core::{EntryState, LaunchPayload, Resources};

use super::{Backend, BackendError, Observation, Phase, ProvisionHandle};
use crate::client::{ApiClient, ClientError};
use crate::clock::{Clock, SystemClock};
use crate::wire::{EntryView, StartRequest};

/// Forwards launches to another engine through its REST API.
///
/// The child engine must have the delegated service registered. The native
/// reference is `remote:<child event>:<child entry>`, so a handle stays
/// usable after the parent restarts. Launches carry `<entry>#<attempt>` as
/// the child's idempotency key.
pub struct RemoteDelegateBackend {
    id: String,
    client: ApiClient,
    clock: Arc<dyn Clock>,
}

impl RemoteDelegateBackend {
    /// `credential` is the parent's own service credential on the child.
    pub fn new(id: &str, endpoint: &str, credential: Option<String>) -> Self {
        Self::with_clock(id, endpoint, credential, Arc::new(SystemClock))
    }

    pub fn with_clock(
        id: &str,
        endpoint: &str,
        credential: Option<String>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            id: id.into(),
            client: ApiClient::new(endpoint, credential),
            clock,
        }
    }

    fn parse_ref(native_ref: &str) -> Option<(&str, &str)> {
        let rest = native_ref.strip_prefix("remote:")?;
        let (event, entry) = rest.split_once(':')?;
        (!event.is_empty() && !entry.is_empty()).then_some((event, entry))
    }

    fn phase_of(entry: &EntryView) -> Phase {
        match entry.state {
            EntryState::Running => Phase::Running,
            EntryState::Stopped => Phase::ExitedOk,
            EntryState::Failed if entry.exhausted => Phase::Crashed,
            EntryState::Terminated => Phase::Unknown,
            _ => Phase::Starting,
        }
    }
}

#[async_trait]
impl Backend for RemoteDelegateBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn provision(&self, payload: &LaunchPayload) -> Result<ProvisionHandle, BackendError> {
        let req = StartRequest {
            version: Some(payload.service.version.clone()),
            env: Some(payload.resolved_env.clone()),
            secret_env: Some(payload.secret_env.clone()),
            client_ref: Some(format!("{}#{}", payload.entry_id, payload.attempt)),
            ..StartRequest::default()
        };
        let started = self
            .client
            .start(&payload.service.name, &req)
            .await
            .map_err(|e| match e {
                ClientError::Transport(m) => BackendError::BackendUnavailable(m),
                other => BackendError::LaunchFailed(other.to_string()),
            })?;
        Ok(ProvisionHandle {
            backend_id: self.id.clone(),
            entry_id: payload.entry_id.clone(),
            native_ref: format!("remote:{}:{}", started.event_id, started.entry_id),
            endpoint: None,
            sidecar_refs: Vec::new(),
        })
    }

    async fn probe(&self, handle: &ProvisionHandle) -> Result<Observation, BackendError> {
        let (event_id, entry_id) = Self::parse_ref(&handle.native_ref)
            .ok_or_else(|| BackendError::UnknownHandle(handle.native_ref.clone()))?;
        let now = self.clock.now_ms();
        let view = match self.client.event(event_id).await {
            Ok(v) => v,
            Err(ClientError::Api { status: 404, .. }) => {
                return Err(BackendError::UnknownHandle(handle.native_ref.clone()))
            }
            Err(e) => return Ok(Observation::new(Phase::Unknown, e.to_string(), now)),
        };
        let Some(entry) = view.entry(entry_id) else {
            return Err(BackendError::UnknownHandle(handle.native_ref.clone()));
        };
        let detail = format!("child entry {:?}", entry.state);
        let mut obs = Observation::new(Self::phase_of(entry), detail, now);
        obs.endpoint = entry.endpoint.clone();
        Ok(obs)
    }

    async fn teardown(&self, handle: &ProvisionHandle) {
        let Some((event_id, _)) = Self::parse_ref(&handle.native_ref) else {
            return;
        };
        if let Err(e) = self.client.terminate(event_id).await {
            tracing::warn!(backend = %self.id, error = %e, "remote teardown failed");
        }
    }

    async fn advertised_capacity(&self) -> Option<Resources> {
        let backends = self.client.backends().await.ok()?;
        Some(backends.iter().fold(Resources::default(), |acc, b| {
            acc.saturating_add(&b.capacity)
        }))
    }
}
