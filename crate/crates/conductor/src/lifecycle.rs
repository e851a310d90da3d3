//! The engine: events, entries and the reconcile loop.
//!
//! Every mutation of an event happens under that event's lock and is
//! committed to the store as one batch together with the recomputed event
//! state. In-memory indexes (fleet reservations, quotas, hostname bindings)
//! are derived from the store and rebuilt when the engine opens.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use conductor_core::model::{is_slug, render_launch_payload};
use conductor_core::placement::DescriptorError;
use conductor_core::state::is_legal_transition;
use conductor_core::{
    derive_event_state, plan_bridges, Admission, BackendDescriptor, BridgeEndpoint, BridgeSpec,
    Decision, EntryState, EventAcl, EventState, FieldKind, IdGenerator, Identity, LaunchPayload,
    Literal, ServiceSpec, TokenKind,
};
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use tokio::sync::{Notify, OwnedMutexGuard};

use crate::authz::{Authz, SESSION_TTL_MS};
use crate::backends::{Backend, BackendError, Phase};
use crate::clock::Clock;
use crate::ingress::BindingTable;
use crate::orchestrator::{BackendFactory, Orchestrator};
use crate::records::{
    EntryRecord, EventRecord, LaunchSource, RouteBinding, ServiceStatus, StoredService,
    TransitionLogRecord,
};
use crate::registry::{self, Quotas, RegistryError, Selector};
use crate::store::{Mutation, State, Store, StoreError, StoreOptions};
use crate::wire::{
    BackendRegistration, EntryView, EventView, ServiceView, StartRequest, TokenResponse,
    ToolDescriptor, REDACTED,
};

/// Lifetime of the entry-injection token; it is revoked earlier by terminate.
pub const INJECTION_TTL_MS: u64 = 365 * 24 * 60 * 60 * 1000;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("not a member of event {0}")]
    Unauthorized(String),
    #[error("unknown event '{0}'")]
    UnknownEvent(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("usage limit reached for {0}")]
    QuotaExceeded(String),
    #[error("invalid inputs: {0}")]
    InvalidInputs(String),
    #[error("event {0} is no longer active")]
    EventTerminal(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type EngineResult<T> = Result<T, EngineError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionKind {
    Route { backend: String },
    RouteFailed { reason: String },
    Provision { attempt: u32 },
    MarkRunning,
    UpdateEndpoint,
    Restart { restart_count: u32 },
    GiveUp { reason: String },
    Stop,
    TtlExpired,
    Cleanup,
}

/// Something reconcile did to one entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Action {
    pub event_id: String,
    pub entry_id: String,
    #[serde(flatten)]
    pub kind: ActionKind,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub base_domain: String,
    /// Scheme and port used when rendering entry URLs.
    pub public_scheme: String,
    pub public_port: Option<u16>,
    pub store: StoreOptions,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            base_domain: "sciorchestra.localhost".into(),
            public_scheme: "http".into(),
            public_port: None,
            store: StoreOptions::default(),
        }
    }
}

/// Secret values for one entry. Held in memory only.
#[derive(Debug, Clone, Default)]
struct Secrets {
    inputs: BTreeMap<String, Literal>,
    env: BTreeMap<String, String>,
}

struct Pending {
    source: LaunchSource,
    secrets: Secrets,
    depends_on: Vec<String>,
}

pub struct Engine {
    opts: EngineOptions,
    clock: Arc<dyn Clock>,
    store: Mutex<Store>,
    authz: Arc<Authz>,
    orchestrator: Orchestrator,
    factory: BackendFactory,
    quotas: Quotas,
    bindings: Arc<BindingTable>,
    ids: Mutex<IdGenerator>,
    event_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    secrets: Mutex<HashMap<String, Secrets>>,
    cleanup_pending: AtomicBool,
    wake: Notify,
}

struct Transition {
    entry_id: String,
    from: EntryState,
    to: EntryState,
    reason: String,
}

impl Engine {
    /// Opens the store in `data_dir` and rebuilds in-memory indexes.
    /// `backends` are instances supplied by configuration; descriptors found
    /// only in the store get an instance from `factory`.
    pub fn open(
        data_dir: &Path,
        opts: EngineOptions,
        clock: Arc<dyn Clock>,
        authz: Arc<Authz>,
        factory: BackendFactory,
        backends: Vec<(BackendDescriptor, Arc<dyn Backend>)>,
    ) -> EngineResult<Self> {
        let store = Store::open(data_dir, opts.store.clone())?;
        let engine = Self {
            opts,
            clock,
            store: Mutex::new(store),
            authz,
            orchestrator: Orchestrator::new(),
            factory,
            quotas: Quotas::default(),
            bindings: Arc::new(BindingTable::new()),
            ids: Mutex::new(IdGenerator::new()),
            event_locks: Mutex::new(HashMap::new()),
            secrets: Mutex::new(HashMap::new()),
            cleanup_pending: AtomicBool::new(true),
            wake: Notify::new(),
        };
        engine.rebuild(backends)?;
        Ok(engine)
    }

    fn rebuild(&self, configured: Vec<(BackendDescriptor, Arc<dyn Backend>)>) -> EngineResult<()> {
        let state = self.state();
        {
            let mut ids = self.ids.lock().unwrap();
            for id in state.events.keys().chain(state.entries.keys()) {
                ids.observe(id);
            }
        }
        self.bindings.load(state.bindings.values().cloned());

        let mut configured: BTreeMap<String, (BackendDescriptor, Arc<dyn Backend>)> = configured
            .into_iter()
            .map(|(d, b)| (d.id.clone(), (d, b)))
            .collect();
        for desc in state.backends.values() {
            let instance = match configured.remove(&desc.id) {
                Some((_, b)) => b,
                None => self.factory.build(&BackendRegistration {
                    descriptor: desc.clone(),
                    credential: None,
                    scripts: None,
                })?,
            };
            self.orchestrator.register(desc.clone(), instance)?;
        }
        for (_, (desc, instance)) in configured {
            let desc = self.orchestrator.register(desc, instance)?;
            self.commit(None, vec![Mutation::PutBackend(desc)])?;
        }

        let mut live: BTreeMap<String, u32> = BTreeMap::new();
        for entry in state.entries.values().filter(|e| !e.is_terminal()) {
            let key = entry.service.to_string();
            *live.entry(key).or_default() += 1;
            if let (Some(b), Some(s)) = (
                &entry.backend_id,
                state.services.get(&entry.service.to_string()),
            ) {
                self.orchestrator
                    .reserve(b, &s.spec.constraints.requested());
            }
        }
        self.quotas.reset(state.services.values().map(|s| {
            let key = s.key();
            let n = live.get(&key).copied().unwrap_or(0);
            (key, s.spec.policy.max_concurrent_entries, n)
        }));
        Ok(())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn authz(&self) -> &Arc<Authz> {
        &self.authz
    }

    pub fn bindings(&self) -> &Arc<BindingTable> {
        &self.bindings
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    /// Sets the port used in rendered URLs, once the proxy is bound.
    pub fn set_public_port(&mut self, port: u16) {
        self.opts.public_port = Some(port);
    }

    /// A consistent copy of the committed state.
    pub fn state(&self) -> State {
        self.store.lock().unwrap().state().clone()
    }

    pub fn store_dir(&self) -> std::path::PathBuf {
        self.store.lock().unwrap().dir().to_path_buf()
    }

    /// Resolves once someone asks for an early reconcile.
    pub async fn woken(&self) {
        self.wake.notified().await
    }

    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    fn next_id(&self) -> String {
        let entropy: u128 = rand::rng().random();
        self.ids
            .lock()
            .unwrap()
            .next(self.now(), entropy)
            .into_string()
    }

    async fn lock_event(&self, event_id: &str) -> OwnedMutexGuard<()> {
        let lock = self
            .event_locks
            .lock()
            .unwrap()
            .entry(event_id.into())
            .or_default()
            .clone();
        lock.lock_owned().await
    }

    /// Whether the store has failed. A halted engine makes no further
    /// backend calls, like a process that died at that point.
    pub fn is_halted(&self) -> bool {
        self.store.lock().unwrap().is_crashed()
    }

    fn ensure_alive(&self) -> Result<(), StoreError> {
        if self.is_halted() {
            return Err(StoreError::Unavailable("store crashed".into()));
        }
        Ok(())
    }

    fn commit(&self, event_id: Option<&str>, mutations: Vec<Mutation>) -> Result<u64, StoreError> {
        let now = self.now();
        self.store.lock().unwrap().commit(now, event_id, mutations)
    }

    /// Commits entry updates for one event together with the recomputed
    /// event state and the transition records.
    fn commit_event(
        &self,
        event: &mut EventRecord,
        entries: &[&EntryRecord],
        transitions: Vec<Transition>,
        mut extra: Vec<Mutation>,
    ) -> Result<(), StoreError> {
        let now = self.now();
        let mut store = self.store.lock().unwrap();
        let conditions: Vec<_> = event
            .entries
            .iter()
            .filter_map(|id| {
                entries
                    .iter()
                    .find(|e| &e.id == id)
                    .map(|e| e.condition())
                    .or_else(|| store.state().entries.get(id).map(EntryRecord::condition))
            })
            .collect();
        event.state = derive_event_state(conditions);
        extra.extend(entries.iter().map(|e| Mutation::PutEntry((*e).clone())));
        extra.extend(transitions.into_iter().map(|t| {
            Mutation::Transition(TransitionLogRecord {
                seq: 0,
                ts: now,
                event_id: event.id.clone(),
                entry_id: Some(t.entry_id),
                from: t.from,
                to: t.to,
                reason: t.reason,
            })
        }));
        extra.push(Mutation::PutEvent(event.clone()));
        store.commit(now, Some(&event.id), extra)?;
        Ok(())
    }

    // ---- registry ----

    pub fn register_service(&self, spec: ServiceSpec) -> EngineResult<ServiceView> {
        let now = self.now();
        let mut store = self.store.lock().unwrap();
        registry::check_registration(&store.state().services, &spec)?;
        let record = StoredService {
            spec,
            status: ServiceStatus::Active,
            registered_at: now,
        };
        store.commit(now, None, vec![Mutation::PutService(record.clone())])?;
        Ok(self.service_view(&record))
    }

    /// Hides a version from `latest`; exact launches keep working.
    pub fn deprecate_service(&self, name: &str, version: &str) -> EngineResult<ServiceView> {
        let now = self.now();
        let mut store = self.store.lock().unwrap();
        let mut record = registry::resolve(
            &store.state().services,
            name,
            &Selector::Exact(version.into()),
        )?
        .clone();
        record.status = ServiceStatus::Deprecated;
        store.commit(
            now,
            None,
            vec![Mutation::SetServiceStatus {
                name: name.into(),
                version: version.into(),
                status: ServiceStatus::Deprecated,
            }],
        )?;
        Ok(self.service_view(&record))
    }

    fn service_view(&self, s: &StoredService) -> ServiceView {
        ServiceView {
            name: s.spec.name.clone(),
            version: s.spec.version.clone(),
            status: s.status,
            registered_at: s.registered_at,
            live_entry_count: self.quotas.live(&s.key()),
            spec: s.spec.clone(),
        }
    }

    /// All versions, ordered by name then numeric version.
    pub fn services(&self) -> Vec<ServiceView> {
        let state = self.state();
        let mut all: Vec<_> = state.services.values().collect();
        all.sort_by(|a, b| {
            (&a.spec.name, a.spec.parsed_version()).cmp(&(&b.spec.name, b.spec.parsed_version()))
        });
        all.into_iter().map(|s| self.service_view(s)).collect()
    }

    pub fn manifest(&self) -> Vec<ToolDescriptor> {
        let state = self.state();
        registry::active_sorted(&state.services)
            .into_iter()
            .map(|s| tool_descriptor(&s.spec))
            .collect()
    }

    // ---- fleet ----

    pub fn register_backend(&self, reg: BackendRegistration) -> EngineResult<BackendDescriptor> {
        let instance = self.factory.build(&reg)?;
        self.register_backend_instance(reg.descriptor, instance)
    }

    /// Registers a backend with a caller-built instance.
    pub fn register_backend_instance(
        &self,
        desc: BackendDescriptor,
        instance: Arc<dyn Backend>,
    ) -> EngineResult<BackendDescriptor> {
        let desc = self.orchestrator.register(desc, instance)?;
        self.commit(None, vec![Mutation::PutBackend(desc.clone())])?;
        self.wake.notify_one();
        Ok(desc)
    }

    pub fn backends(&self) -> Vec<BackendDescriptor> {
        self.orchestrator.snapshot()
    }

    // ---- events ----

    fn resolve_for_launch(
        &self,
        service: &str,
        version: Option<&str>,
    ) -> EngineResult<ServiceSpec> {
        let name = service.replace('_', "-");
        let state = self.store.lock().unwrap();
        let rec = registry::resolve(&state.state().services, &name, &Selector::parse(version))?;
        Ok(rec.spec.clone())
    }

    /// Splits a start request into what is persisted and what stays in memory.
    fn prepare(
        &self,
        spec: &ServiceSpec,
        req: &StartRequest,
        siblings: &[EntryRecord],
    ) -> EngineResult<Pending> {
        if let Some(env) = &req.env {
            if req.inputs.as_ref().is_some_and(|i| !i.is_empty()) {
                return Err(EngineError::BadRequest(
                    "give either inputs or env, not both".into(),
                ));
            }
            let secret_env = req.secret_env.clone().unwrap_or_default();
            let (secret, public): (BTreeMap<_, _>, BTreeMap<_, _>) = env
                .clone()
                .into_iter()
                .partition(|(k, _)| secret_env.contains(k));
            return Ok(Pending {
                source: LaunchSource::Env {
                    env: public,
                    secret_env,
                },
                secrets: Secrets {
                    env: secret,
                    ..Secrets::default()
                },
                depends_on: Vec::new(),
            });
        }
        let inputs = req.inputs.clone().unwrap_or_default();
        // Rendering with a placeholder token type-checks the inputs.
        render_launch_payload(spec, &inputs, "", "")
            .map_err(|e| EngineError::InvalidInputs(e.to_string()))?;
        let mut public = BTreeMap::new();
        let mut secret = BTreeMap::new();
        let mut depends_on = Vec::new();
        for (name, value) in inputs {
            let kind = spec.schema.input(&name).map(|f| f.kind);
            if kind == Some(FieldKind::Url) {
                if let Literal::Text(url) = &value {
                    for s in siblings {
                        if s.hostname.as_deref().is_some_and(|h| url.contains(h))
                            && !depends_on.contains(&s.id)
                        {
                            depends_on.push(s.id.clone());
                        }
                    }
                }
            }
            if kind == Some(FieldKind::Secret) {
                secret.insert(name, value);
            } else {
                public.insert(name, value);
            }
        }
        Ok(Pending {
            source: LaunchSource::Inputs {
                inputs: public,
                secret_inputs: secret.keys().cloned().collect(),
            },
            secrets: Secrets {
                inputs: secret,
                ..Secrets::default()
            },
            depends_on,
        })
    }

    fn admit(&self, spec: &ServiceSpec) -> EngineResult<()> {
        let key = spec.service_ref().to_string();
        match self.quotas.admit(&key, spec.policy.max_concurrent_entries) {
            Admission::Admit => Ok(()),
            Admission::Reject(_) => Err(EngineError::QuotaExceeded(key)),
        }
    }

    fn new_entry(
        &self,
        spec: &ServiceSpec,
        event_id: &str,
        pending: &Pending,
        client_ref: Option<String>,
    ) -> (EntryRecord, Option<RouteBinding>) {
        let now = self.now();
        let id = self.next_id();
        let binding = spec.web_entry.then(|| {
            self.bindings
                .reserve(&spec.name, event_id, &id, &self.opts.base_domain, now)
        });
        let entry = EntryRecord {
            id,
            event_id: event_id.into(),
            service: spec.service_ref(),
            backend_id: None,
            state: EntryState::Pending,
            endpoint: None,
            hostname: binding.as_ref().map(|b| b.hostname.clone()),
            restart_count: 0,
            payload_digest: None,
            last_transition_at: now,
            created_at: now,
            exhausted: false,
            running_since: None,
            handle: None,
            launch: pending.source.clone(),
            depends_on: pending.depends_on.clone(),
            last_error: None,
            client_ref,
        };
        (entry, binding)
    }

    fn find_client_ref(&self, client_ref: &str) -> Option<EntryRecord> {
        let store = self.store.lock().unwrap();
        store
            .state()
            .entries
            .values()
            .find(|e| e.client_ref.as_deref() == Some(client_ref))
            .cloned()
    }

    /// Creates an event with one pending entry.
    pub fn create_event(
        &self,
        owner: &Identity,
        service: &str,
        req: &StartRequest,
    ) -> EngineResult<(EventRecord, EntryRecord)> {
        if let Some(existing) = req
            .client_ref
            .as_deref()
            .and_then(|r| self.find_client_ref(r))
        {
            let event = self.state().events[&existing.event_id].clone();
            return Ok((event, existing));
        }
        let spec = self.resolve_for_launch(service, req.version.as_deref())?;
        let pending = self.prepare(&spec, req, &[])?;
        self.admit(&spec)?;

        let now = self.now();
        let event_id = self.next_id();
        let (entry, binding) = self.new_entry(&spec, &event_id, &pending, req.client_ref.clone());
        let mut event = EventRecord {
            id: event_id.clone(),
            owner: owner.clone(),
            acl: EventAcl::new(owner.clone()),
            entries: vec![entry.id.clone()],
            state: EventState::Requested,
            created_at: now,
            token_expires_at: now + INJECTION_TTL_MS,
            bridges: Vec::new(),
        };
        let extra = binding.iter().cloned().map(Mutation::PutBinding).collect();
        if let Err(e) = self.commit_event(&mut event, &[&entry], Vec::new(), extra) {
            self.quotas.release(&spec.service_ref().to_string());
            if let Some(b) = binding {
                self.bindings.remove(&b.hostname);
            }
            return Err(e.into());
        }
        self.secrets
            .lock()
            .unwrap()
            .insert(entry.id.clone(), pending.secrets);
        self.wake.notify_one();
        Ok((event, entry))
    }

    fn load_event(&self, event_id: &str) -> EngineResult<(EventRecord, Vec<EntryRecord>)> {
        let store = self.store.lock().unwrap();
        let state = store.state();
        let event = state
            .events
            .get(event_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownEvent(event_id.into()))?;
        let entries = event
            .entries
            .iter()
            .filter_map(|id| state.entries.get(id).cloned())
            .collect();
        Ok((event, entries))
    }

    fn authorize(&self, event: &EventRecord, caller: &Identity) -> EngineResult<()> {
        match event.acl.authorize(caller) {
            Decision::Allow => Ok(()),
            Decision::Deny => Err(EngineError::Unauthorized(event.id.clone())),
        }
    }

    /// Adds an entry to an existing event; it shares the event's token.
    pub async fn add_entry(
        &self,
        event_id: &str,
        caller: &Identity,
        service: &str,
        req: &StartRequest,
    ) -> EngineResult<EntryRecord> {
        let _guard = self.lock_event(event_id).await;
        let (mut event, siblings) = self.load_event(event_id)?;
        self.authorize(&event, caller)?;
        if matches!(
            event.state,
            EventState::Terminated | EventState::Completed | EventState::Failed
        ) {
            return Err(EngineError::EventTerminal(event_id.into()));
        }
        let spec = self.resolve_for_launch(service, req.version.as_deref())?;
        let pending = self.prepare(&spec, req, &siblings)?;
        self.admit(&spec)?;
        let (entry, binding) = self.new_entry(&spec, event_id, &pending, req.client_ref.clone());
        event.entries.push(entry.id.clone());
        let extra = binding.iter().cloned().map(Mutation::PutBinding).collect();
        if let Err(e) = self.commit_event(&mut event, &[&entry], Vec::new(), extra) {
            self.quotas.release(&spec.service_ref().to_string());
            if let Some(b) = binding {
                self.bindings.remove(&b.hostname);
            }
            return Err(e.into());
        }
        self.secrets
            .lock()
            .unwrap()
            .insert(entry.id.clone(), pending.secrets);
        self.wake.notify_one();
        Ok(entry)
    }

    pub async fn share_event(
        &self,
        event_id: &str,
        target: Identity,
        caller: &Identity,
    ) -> EngineResult<EventView> {
        let _guard = self.lock_event(event_id).await;
        let (mut event, _) = self.load_event(event_id)?;
        event
            .acl
            .share(target, caller)
            .map_err(|_| EngineError::Unauthorized(event_id.into()))?;
        self.commit(Some(event_id), vec![Mutation::PutEvent(event.clone())])?;
        Ok(self.view(&event))
    }

    /// Tears every entry down and releases the event's hostnames. Idempotent.
    pub async fn terminate_event(
        &self,
        event_id: &str,
        caller: &Identity,
    ) -> EngineResult<EventView> {
        let _guard = self.lock_event(event_id).await;
        let (mut event, entries) = self.load_event(event_id)?;
        self.authorize(&event, caller)?;
        if event.state == EventState::Terminated {
            return Ok(self.view(&event));
        }
        let now = self.now();
        let mut updated = Vec::new();
        let mut transitions = Vec::new();
        let mut to_release = Vec::new();
        for entry in entries {
            if entry.state == EntryState::Terminated {
                continue;
            }
            if !entry.is_terminal() {
                to_release.push(entry.clone());
            }
            let mut e = entry;
            transitions.push(Transition {
                entry_id: e.id.clone(),
                from: e.state,
                to: EntryState::Terminated,
                reason: "event terminated".into(),
            });
            e.state = EntryState::Terminated;
            e.endpoint = None;
            e.last_transition_at = now;
            updated.push(e);
        }
        let removals = self
            .bindings
            .for_event(event_id)
            .into_iter()
            .map(|b| Mutation::RemoveBinding {
                hostname: b.hostname,
            })
            .collect();
        let refs: Vec<_> = updated.iter().collect();
        self.commit_event(&mut event, &refs, transitions, removals)?;
        self.bindings.release_event(event_id);
        for e in &to_release {
            self.release_resources(e);
            if let Some(h) = &e.handle {
                if let Some(b) = self.orchestrator.instance(&h.backend_id) {
                    b.teardown(h).await;
                }
            }
        }
        let mut secrets = self.secrets.lock().unwrap();
        for e in &updated {
            secrets.remove(&e.id);
        }
        drop(secrets);
        Ok(self.view(&event))
    }

    pub fn event_view(&self, event_id: &str, caller: &Identity) -> EngineResult<EventView> {
        let (event, _) = self.load_event(event_id)?;
        self.authorize(&event, caller)?;
        Ok(self.view(&event))
    }

    /// Events the caller is a member of, oldest first.
    pub fn list_events(&self, caller: &Identity) -> Vec<EventView> {
        let state = self.state();
        state
            .events
            .values()
            .filter(|e| e.acl.authorize(caller) == Decision::Allow)
            .map(|e| view_of(e, &state, &self.opts))
            .collect()
    }

    /// A user-session token for the event's URLs.
    pub fn session_token(&self, event_id: &str, caller: &Identity) -> EngineResult<TokenResponse> {
        let (event, _) = self.load_event(event_id)?;
        self.authorize(&event, caller)?;
        if event.state == EventState::Terminated {
            return Err(EngineError::EventTerminal(event_id.into()));
        }
        let expires_at = self.now() + SESSION_TTL_MS;
        Ok(TokenResponse {
            event_id: event_id.into(),
            token: self
                .authz
                .mint(event_id, TokenKind::UserSession, expires_at),
            expires_at,
        })
    }

    /// The token rendered into payloads of this event's entries.
    pub fn injection_token(&self, event: &EventRecord) -> String {
        self.authz
            .mint(&event.id, TokenKind::EntryInjection, event.token_expires_at)
    }

    fn view(&self, event: &EventRecord) -> EventView {
        let store = self.store.lock().unwrap();
        view_of(event, store.state(), &self.opts)
    }

    // ---- reconcile ----

    /// One sweep over every event with live entries. Per-entry failures are
    /// recorded on the entry; a store failure ends the sweep for that event.
    pub async fn reconcile(&self) -> Vec<Action> {
        let mut actions = Vec::new();
        if self.is_halted() {
            return actions;
        }
        if self.cleanup_pending.swap(false, Ordering::SeqCst) {
            actions.extend(self.cleanup_terminal_handles().await);
        }
        self.orchestrator.refresh_capacity().await;
        let events: Vec<String> = {
            let store = self.store.lock().unwrap();
            let state = store.state();
            state
                .events
                .values()
                .filter(|ev| {
                    ev.entries
                        .iter()
                        .any(|id| state.entries.get(id).is_some_and(|e| !e.is_terminal()))
                })
                .map(|ev| ev.id.clone())
                .collect()
        };
        let sweeps = events.iter().map(|id| self.reconcile_event(id));
        for result in futures::future::join_all(sweeps).await {
            match result {
                Ok(a) => actions.extend(a),
                Err(e) => tracing::warn!(error = %e, "reconcile stopped for an event"),
            }
        }
        for a in &actions {
            tracing::debug!(event = %a.event_id, entry = %a.entry_id, action = ?a.kind, "reconcile");
        }
        actions
    }

    /// Repeats sweeps until one issues no action, at most `max_sweeps` times.
    /// Returns the number of sweeps that issued actions.
    pub async fn reconcile_until_idle(&self, max_sweeps: usize) -> usize {
        for n in 0..max_sweeps {
            if self.reconcile().await.is_empty() {
                return n;
            }
        }
        max_sweeps
    }

    /// Tears down handles that terminal entries may still hold after a
    /// restart interrupted a teardown.
    async fn cleanup_terminal_handles(&self) -> Vec<Action> {
        let state = self.state();
        let mut actions = Vec::new();
        for e in state.entries.values().filter(|e| e.is_terminal()) {
            let Some(h) = &e.handle else { continue };
            let Some(b) = self.orchestrator.instance(&h.backend_id) else {
                continue;
            };
            if let Ok(obs) = b.probe(h).await {
                if obs.phase != Phase::Unknown {
                    b.teardown(h).await;
                    actions.push(self.action(e, ActionKind::Cleanup));
                }
            }
        }
        actions
    }

    async fn reconcile_event(&self, event_id: &str) -> Result<Vec<Action>, StoreError> {
        let _guard = self.lock_event(event_id).await;
        let mut actions = Vec::new();
        let entry_ids = match self.load_event(event_id) {
            Ok((event, _)) => event.entries,
            Err(_) => return Ok(actions),
        };
        for id in entry_ids {
            self.step_entry(event_id, &id, &mut actions).await?;
        }
        Ok(actions)
    }

    fn snapshot_entry(
        &self,
        event_id: &str,
        entry_id: &str,
    ) -> Option<(EventRecord, EntryRecord, ServiceSpec)> {
        let store = self.store.lock().unwrap();
        let state = store.state();
        let event = state.events.get(event_id)?.clone();
        let entry = state.entries.get(entry_id)?.clone();
        let spec = state.services.get(&entry.service.to_string())?.spec.clone();
        Some((event, entry, spec))
    }

    async fn step_entry(
        &self,
        event_id: &str,
        entry_id: &str,
        actions: &mut Vec<Action>,
    ) -> Result<(), StoreError> {
        let Some((mut event, mut entry, spec)) = self.snapshot_entry(event_id, entry_id) else {
            return Ok(());
        };
        if entry.is_terminal() {
            return Ok(());
        }
        match entry.state {
            EntryState::Pending | EntryState::Routing => {
                if self.route(&mut event, &mut entry, &spec, actions)? {
                    self.provision(&mut event, &mut entry, &spec, actions)
                        .await?;
                }
            }
            EntryState::Provisioning => {
                self.provision(&mut event, &mut entry, &spec, actions)
                    .await?;
            }
            EntryState::Restarting => {
                let t = step(&mut entry, EntryState::Provisioning, "restart", self.now());
                self.commit_event(&mut event, &[&entry], vec![t], Vec::new())?;
                self.provision(&mut event, &mut entry, &spec, actions)
                    .await?;
            }
            EntryState::Failed => {
                self.fail(&mut event, &mut entry, &spec, "failed", false, actions)
                    .await?;
            }
            EntryState::Starting | EntryState::Running => {
                self.probe(&mut event, &mut entry, &spec, actions).await?;
            }
            EntryState::Stopped | EntryState::Terminated => {}
        }
        Ok(())
    }

    fn action(&self, entry: &EntryRecord, kind: ActionKind) -> Action {
        Action {
            event_id: entry.event_id.clone(),
            entry_id: entry.id.clone(),
            kind,
        }
    }

    /// Routes a pending entry. Returns true when it reached Provisioning.
    fn route(
        &self,
        event: &mut EventRecord,
        entry: &mut EntryRecord,
        spec: &ServiceSpec,
        actions: &mut Vec<Action>,
    ) -> Result<bool, StoreError> {
        let now = self.now();
        let mut transitions = Vec::new();
        if entry.state == EntryState::Pending {
            transitions.push(step(entry, EntryState::Routing, "route", now));
        }
        let routed = self
            .orchestrator
            .route_and_reserve(&spec.constraints)
            .map_err(|e| e.to_string())
            .and_then(|backend| {
                entry.backend_id = Some(backend.clone());
                match self.plan_event_bridges(event, entry) {
                    Ok(bridges) => {
                        event.bridges = bridges;
                        Ok(backend)
                    }
                    Err(e) => {
                        self.orchestrator
                            .release(&backend, &spec.constraints.requested());
                        entry.backend_id = None;
                        Err(e)
                    }
                }
            });
        match routed {
            Ok(backend) => {
                transitions.push(step(entry, EntryState::Provisioning, "placed", now));
                if let Err(e) = self.commit_event(event, &[entry], transitions, Vec::new()) {
                    self.orchestrator
                        .release(&backend, &spec.constraints.requested());
                    return Err(e);
                }
                actions.push(self.action(entry, ActionKind::Route { backend }));
                Ok(true)
            }
            Err(reason) => {
                transitions.push(step(entry, EntryState::Failed, &reason, now));
                entry.exhausted = true;
                entry.last_error = Some(reason.clone());
                self.commit_event(event, &[entry], transitions, Vec::new())?;
                self.release_resources(entry);
                actions.push(self.action(entry, ActionKind::RouteFailed { reason }));
                Ok(false)
            }
        }
    }

    fn plan_event_bridges(
        &self,
        event: &EventRecord,
        placed: &EntryRecord,
    ) -> Result<Vec<BridgeSpec>, String> {
        let store = self.store.lock().unwrap();
        let state = store.state();
        let mut entries: Vec<EntryRecord> = event
            .entries
            .iter()
            .filter_map(|id| state.entries.get(id).cloned())
            .filter(|e| e.id != placed.id)
            .collect();
        entries.push(placed.clone());
        let endpoints: Vec<BridgeEndpoint> = entries
            .iter()
            .filter(|e| !e.is_terminal())
            .filter_map(|e| {
                let port = state
                    .services
                    .get(&e.service.to_string())
                    .and_then(|s| s.spec.ports.first().copied())
                    .unwrap_or(0);
                Some(BridgeEndpoint {
                    entry_id: e.id.clone(),
                    backend_id: e.backend_id.clone()?,
                    port,
                })
            })
            .collect();
        let placed_ids: BTreeSet<_> = endpoints.iter().map(|e| e.entry_id.clone()).collect();
        let deps: Vec<(String, String)> = entries
            .iter()
            .flat_map(|e| e.depends_on.iter().map(move |d| (e.id.clone(), d.clone())))
            .filter(|(c, p)| placed_ids.contains(c) && placed_ids.contains(p))
            .collect();
        drop(store);
        plan_bridges(&endpoints, &deps, &self.orchestrator.reachability())
            .map_err(|e| e.to_string())
    }

    fn payload_for(
        &self,
        event: &EventRecord,
        entry: &EntryRecord,
        spec: &ServiceSpec,
    ) -> Result<LaunchPayload, String> {
        let token = self.injection_token(event);
        let secrets = self
            .secrets
            .lock()
            .unwrap()
            .get(&entry.id)
            .cloned()
            .unwrap_or_default();
        let mut payload = match &entry.launch {
            LaunchSource::Inputs {
                inputs,
                secret_inputs,
            } => {
                if secret_inputs
                    .iter()
                    .any(|k| !secrets.inputs.contains_key(k))
                {
                    return Err("secret inputs are not available after an engine restart".into());
                }
                let mut all = inputs.clone();
                all.extend(secrets.inputs);
                render_launch_payload(spec, &all, &token, &entry.id).map_err(|e| e.to_string())?
            }
            LaunchSource::Env { env, secret_env } => {
                if secret_env.iter().any(|k| !secrets.env.contains_key(k)) {
                    return Err(
                        "secret env values are not available after an engine restart".into(),
                    );
                }
                let mut resolved_env = env.clone();
                resolved_env.extend(secrets.env);
                LaunchPayload {
                    service: spec.service_ref(),
                    image_ref: spec.image_ref.clone(),
                    command: spec.command.clone(),
                    resolved_env,
                    secret_env: secret_env.clone(),
                    ports: spec.ports.clone(),
                    sidecars: spec.sidecars.clone(),
                    constraints: spec.constraints.clone(),
                    web_entry: spec.web_entry,
                    event_token: token,
                    entry_id: entry.id.clone(),
                    attempt: 0,
                }
            }
        };
        payload.attempt = entry.restart_count;
        Ok(payload)
    }

    fn set_binding_target(&self, entry: &EntryRecord, extra: &mut Vec<Mutation>) {
        if let Some(h) = &entry.hostname {
            if let Some(b) = self.bindings.set_target(h, entry.endpoint.clone()) {
                extra.push(Mutation::PutBinding(b));
            }
        }
    }

    async fn provision(
        &self,
        event: &mut EventRecord,
        entry: &mut EntryRecord,
        spec: &ServiceSpec,
        actions: &mut Vec<Action>,
    ) -> Result<(), StoreError> {
        self.ensure_alive()?;
        let payload = match self.payload_for(event, entry, spec) {
            Ok(p) => p,
            Err(reason) => {
                entry.last_error = Some(reason.clone());
                return self.give_up(event, entry, &reason, actions);
            }
        };
        let backend = entry
            .backend_id
            .as_deref()
            .and_then(|id| self.orchestrator.instance(id));
        let Some(backend) = backend else {
            let reason = format!("backend {:?} is not available", entry.backend_id);
            entry.last_error = Some(reason.clone());
            return self.give_up(event, entry, &reason, actions);
        };
        match backend.provision(&payload).await {
            Ok(handle) => {
                let now = self.now();
                entry.payload_digest = Some(digest(&payload));
                entry.endpoint = handle.endpoint.clone();
                entry.handle = Some(handle);
                entry.last_error = None;
                let t = step(entry, EntryState::Starting, "provisioned", now);
                let mut extra = Vec::new();
                self.set_binding_target(entry, &mut extra);
                self.commit_event(event, &[entry], vec![t], extra)?;
                actions.push(self.action(
                    entry,
                    ActionKind::Provision {
                        attempt: payload.attempt,
                    },
                ));
                Ok(())
            }
            Err(e) => {
                entry.last_error = Some(e.to_string());
                Box::pin(self.fail(event, entry, spec, &e.to_string(), false, actions)).await
            }
        }
    }

    async fn probe(
        &self,
        event: &mut EventRecord,
        entry: &mut EntryRecord,
        spec: &ServiceSpec,
        actions: &mut Vec<Action>,
    ) -> Result<(), StoreError> {
        let now = self.now();
        let (Some(handle), Some(backend)) = (
            entry.handle.clone(),
            entry
                .backend_id
                .as_deref()
                .and_then(|id| self.orchestrator.instance(id)),
        ) else {
            return self
                .fail(event, entry, spec, "no handle", false, actions)
                .await;
        };
        let obs = match backend.probe(&handle).await {
            Ok(o) => o,
            Err(e @ BackendError::UnknownHandle(_)) => {
                return self
                    .fail(event, entry, spec, &e.to_string(), false, actions)
                    .await
            }
            Err(e) => {
                return self
                    .fail(event, entry, spec, &e.to_string(), true, actions)
                    .await
            }
        };
        let mut extra = Vec::new();
        let mut transitions = Vec::new();
        let mut kind = None;
        if let Some(ep) = &obs.endpoint {
            if entry.endpoint.as_ref() != Some(ep) {
                entry.endpoint = Some(ep.clone());
                if let Some(h) = entry.handle.as_mut() {
                    h.endpoint = Some(ep.clone());
                }
                self.set_binding_target(entry, &mut extra);
                kind = Some(ActionKind::UpdateEndpoint);
            }
        }
        match obs.phase {
            Phase::Starting => {}
            Phase::Running => {
                if entry.state == EntryState::Starting {
                    transitions.push(step(entry, EntryState::Running, "probe: running", now));
                    entry.running_since = Some(now);
                    kind = Some(ActionKind::MarkRunning);
                } else if let (Some(ttl), Some(since)) =
                    (spec.policy.ttl_seconds, entry.running_since)
                {
                    if now > since + ttl * 1000 {
                        transitions.push(step(entry, EntryState::Stopped, "ttl expired", now));
                        kind = Some(ActionKind::TtlExpired);
                    }
                }
            }
            Phase::ExitedOk => {
                if entry.state == EntryState::Starting {
                    transitions.push(step(entry, EntryState::Running, "probe: exited", now));
                    entry.running_since = Some(now);
                }
                transitions.push(step(entry, EntryState::Stopped, "probe: exited ok", now));
                kind = Some(ActionKind::Stop);
            }
            Phase::Crashed | Phase::Unknown => {
                let reason = format!("probe: {:?} ({})", obs.phase, obs.detail).to_lowercase();
                return self.fail(event, entry, spec, &reason, true, actions).await;
            }
        }
        let Some(kind) = kind else {
            return Ok(());
        };
        let stopped = entry.state == EntryState::Stopped;
        if stopped {
            entry.endpoint = None;
            self.set_binding_target(entry, &mut extra);
        }
        self.commit_event(event, &[entry], transitions, extra)?;
        if stopped {
            self.release_resources(entry);
            backend.teardown(&handle).await;
        }
        actions.push(self.action(entry, kind));
        Ok(())
    }

    /// Marks the entry failed and either restarts it on the same backend or,
    /// with no budget left, leaves it failed for good.
    async fn fail(
        &self,
        event: &mut EventRecord,
        entry: &mut EntryRecord,
        spec: &ServiceSpec,
        reason: &str,
        teardown: bool,
        actions: &mut Vec<Action>,
    ) -> Result<(), StoreError> {
        self.ensure_alive()?;
        if teardown {
            if let (Some(h), Some(b)) = (
                &entry.handle,
                entry
                    .backend_id
                    .as_deref()
                    .and_then(|id| self.orchestrator.instance(id)),
            ) {
                b.teardown(h).await;
            }
        }
        let now = self.now();
        let mut transitions = Vec::new();
        if entry.state != EntryState::Failed {
            transitions.push(step(entry, EntryState::Failed, reason, now));
        }
        entry.last_error = Some(reason.into());
        entry.endpoint = None;
        let mut extra = Vec::new();
        self.set_binding_target(entry, &mut extra);
        if entry.restart_count >= spec.policy.restart_budget {
            entry.exhausted = true;
            self.commit_event(event, &[entry], transitions, extra)?;
            self.release_resources(entry);
            actions.push(self.action(
                entry,
                ActionKind::GiveUp {
                    reason: reason.into(),
                },
            ));
            return Ok(());
        }
        transitions.push(step_with(
            entry,
            EntryState::Restarting,
            "restart",
            now,
            true,
        ));
        entry.restart_count += 1;
        entry.handle = None;
        entry.running_since = None;
        transitions.push(step(entry, EntryState::Provisioning, "restart", now));
        self.commit_event(event, &[entry], transitions, extra)?;
        actions.push(self.action(
            entry,
            ActionKind::Restart {
                restart_count: entry.restart_count,
            },
        ));
        Box::pin(self.provision(event, entry, spec, actions)).await
    }

    /// Fails an entry without retrying: the cause would repeat.
    fn give_up(
        &self,
        event: &mut EventRecord,
        entry: &mut EntryRecord,
        reason: &str,
        actions: &mut Vec<Action>,
    ) -> Result<(), StoreError> {
        let now = self.now();
        let t = step(entry, EntryState::Failed, reason, now);
        entry.exhausted = true;
        entry.endpoint = None;
        let mut extra = Vec::new();
        self.set_binding_target(entry, &mut extra);
        self.commit_event(event, &[entry], vec![t], extra)?;
        self.release_resources(entry);
        actions.push(self.action(
            entry,
            ActionKind::GiveUp {
                reason: reason.into(),
            },
        ));
        Ok(())
    }

    /// Returns the entry's quota slot and reservation. Call exactly once,
    /// when the entry becomes terminal.
    fn release_resources(&self, entry: &EntryRecord) {
        self.quotas.release(&entry.service.to_string());
        if let Some(b) = &entry.backend_id {
            let store = self.store.lock().unwrap();
            if let Some(s) = store.state().services.get(&entry.service.to_string()) {
                self.orchestrator
                    .release(b, &s.spec.constraints.requested());
            }
        }
    }

    /// Forces a snapshot of the store.
    pub fn snapshot(&self) -> Result<(), StoreError> {
        self.store.lock().unwrap().snapshot()
    }
}

fn step(entry: &mut EntryRecord, to: EntryState, reason: &str, now: u64) -> Transition {
    step_with(entry, to, reason, now, false)
}

fn step_with(
    entry: &mut EntryRecord,
    to: EntryState,
    reason: &str,
    now: u64,
    restarts_left: bool,
) -> Transition {
    debug_assert!(
        is_legal_transition(entry.state, to, restarts_left),
        "{:?} -> {:?}",
        entry.state,
        to
    );
    let t = Transition {
        entry_id: entry.id.clone(),
        from: entry.state,
        to,
        reason: reason.into(),
    };
    entry.state = to;
    entry.last_transition_at = now;
    t
}

fn digest(payload: &LaunchPayload) -> String {
    let bytes = serde_json::to_vec(payload).expect("payload serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn entry_url(hostname: &str, opts: &EngineOptions) -> String {
    let default_port = match opts.public_scheme.as_str() {
        "https" => 443,
        _ => 80,
    };
    match opts.public_port {
        Some(p) if p != default_port => format!("{}://{hostname}:{p}", opts.public_scheme),
        _ => format!("{}://{hostname}", opts.public_scheme),
    }
}

fn view_of(event: &EventRecord, state: &State, opts: &EngineOptions) -> EventView {
    let entries = event
        .entries
        .iter()
        .filter_map(|id| state.entries.get(id))
        .map(|e| {
            let inputs = match &e.launch {
                LaunchSource::Inputs {
                    inputs,
                    secret_inputs,
                } => {
                    let mut shown = inputs.clone();
                    for k in secret_inputs {
                        shown.insert(k.clone(), Literal::Text(REDACTED.into()));
                    }
                    shown
                }
                LaunchSource::Env { .. } => BTreeMap::new(),
            };
            EntryView {
                id: e.id.clone(),
                service: e.service.name.clone(),
                version: e.service.version.clone(),
                state: e.state,
                exhausted: e.exhausted,
                url: e
                    .hostname
                    .as_deref()
                    .filter(|_| !e.is_terminal())
                    .map(|h| entry_url(h, opts)),
                hostname: e.hostname.clone(),
                endpoint: e.endpoint.clone(),
                backend_id: e.backend_id.clone(),
                restart_count: e.restart_count,
                last_error: e.last_error.clone(),
                inputs,
                depends_on: e.depends_on.clone(),
            }
        })
        .collect();
    EventView {
        id: event.id.clone(),
        state: event.state,
        owner: event.owner.to_string(),
        members: event.acl.members.iter().map(|m| m.to_string()).collect(),
        created_at: event.created_at,
        entries,
        bridges: event.bridges.clone(),
    }
}

fn field_schema(fields: &[conductor_core::FieldSpec]) -> serde_json::Value {
    let mut props = serde_json::Map::new();
    let mut required = Vec::new();
    for f in fields {
        let mut p = serde_json::Map::new();
        let (ty, format) = match f.kind {
            FieldKind::String => ("string", None),
            FieldKind::Integer => ("integer", None),
            FieldKind::Number => ("number", None),
            FieldKind::Boolean => ("boolean", None),
            FieldKind::Url => ("string", Some("uri")),
            FieldKind::Secret => ("string", Some("password")),
        };
        p.insert("type".into(), ty.into());
        if let Some(fmt) = format {
            p.insert("format".into(), fmt.into());
        }
        if f.kind == FieldKind::Secret {
            p.insert("writeOnly".into(), true.into());
        }
        if !f.description.is_empty() {
            p.insert("description".into(), f.description.clone().into());
        }
        if let Some(d) = &f.default {
            p.insert("default".into(), serde_json::to_value(d).expect("literal"));
        }
        if f.required {
            required.push(serde_json::Value::from(f.name.clone()));
        }
        props.insert(f.name.clone(), p.into());
    }
    serde_json::json!({
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": false,
    })
}

pub fn tool_descriptor(spec: &ServiceSpec) -> ToolDescriptor {
    ToolDescriptor {
        name: spec.name.clone(),
        version: spec.version.clone(),
        description: spec.description.clone(),
        input_schema: field_schema(&spec.schema.inputs),
        output_schema: field_schema(&spec.schema.outputs),
        invoke_hint: format!("POST /start/{}", spec.name),
    }
}

/// Whether `name` could be a service name after underscore normalization.
pub fn plausible_service_name(name: &str) -> bool {
    is_slug(&name.replace('_', "-"))
}
