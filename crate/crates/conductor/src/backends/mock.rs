use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use conductor_core::LaunchPayload;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Observation, Phase, ProvisionHandle};
use crate::clock::{Clock, SystemClock};
use crate::records::Endpoint;

/// Per-service probe scripts. `scripts[name][attempt]` is the phase sequence
/// returned by successive probes of that attempt; the last attempt's script
/// is reused for later attempts and the last phase of a script repeats.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScripts {
    #[serde(default)]
    pub services: BTreeMap<String, Vec<Vec<Phase>>>,
    /// Used for services without a script of their own.
    #[serde(default)]
    pub default: Option<Vec<Phase>>,
}

impl MockScripts {
    pub fn service(mut self, name: &str, attempts: Vec<Vec<Phase>>) -> Self {
        self.services.insert(name.into(), attempts);
        self
    }

    fn script_for(&self, service: &str, attempt: u32) -> Vec<Phase> {
        if let Some(attempts) = self.services.get(service).filter(|a| !a.is_empty()) {
            let i = (attempt as usize).min(attempts.len() - 1);
            return attempts[i].clone();
        }
        self.default.clone().unwrap_or_else(|| vec![Phase::Running])
    }
}

struct Slot {
    handle: ProvisionHandle,
    script: Vec<Phase>,
    cursor: usize,
    sticky: Option<Phase>,
}

#[derive(Default)]
struct MockState {
    slots: HashMap<String, Slot>,
    by_key: HashMap<(String, u32), String>,
    retired: HashSet<String>,
    provisions_by_entry: BTreeMap<String, u32>,
    teardowns: Vec<String>,
}

/// Deterministic scripted backend for tests and fault injection.
pub struct MockBackend {
    id: String,
    scripts: Mutex<MockScripts>,
    endpoint: Mutex<Option<Endpoint>>,
    state: Mutex<MockState>,
    next_ref: AtomicU64,
    unreachable: AtomicBool,
    clock: Arc<dyn Clock>,
}

impl MockBackend {
    pub fn new(id: &str, scripts: MockScripts) -> Self {
        Self::with_clock(id, scripts, Arc::new(SystemClock))
    }

    pub fn with_clock(id: &str, scripts: MockScripts, clock: Arc<dyn Clock>) -> Self {
        Self {
            id: id.into(),
            scripts: Mutex::new(scripts),
            endpoint: Mutex::new(None),
            state: Mutex::new(MockState::default()),
            next_ref: AtomicU64::new(1),
            unreachable: AtomicBool::new(false),
            clock,
        }
    }

    /// Endpoint handed out to web entries. Defaults to the discard port.
    pub fn set_endpoint(&self, endpoint: Endpoint) {
        *self.endpoint.lock().unwrap() = Some(endpoint);
    }

    pub fn set_scripts(&self, scripts: MockScripts) {
        *self.scripts.lock().unwrap() = scripts;
    }

    pub fn set_unreachable(&self, unreachable: bool) {
        self.unreachable.store(unreachable, Ordering::SeqCst);
    }

    /// Distinct workloads started so far (repeated idempotent calls excluded).
    pub fn provision_count(&self) -> usize {
        self.state.lock().unwrap().by_key.len()
    }

    pub fn provisions_for(&self, entry_id: &str) -> u32 {
        self.state
            .lock()
            .unwrap()
            .provisions_by_entry
            .get(entry_id)
            .copied()
            .unwrap_or(0)
    }

    pub fn native_refs(&self) -> Vec<String> {
        let st = self.state.lock().unwrap();
        let mut refs: Vec<_> = st.by_key.values().cloned().collect();
        refs.sort();
        refs
    }

    /// Handles provisioned for `entry_id` that were not torn down.
    pub fn live_handles_for(&self, entry_id: &str) -> usize {
        let st = self.state.lock().unwrap();
        st.slots
            .values()
            .filter(|s| s.handle.entry_id == entry_id && !st.retired.contains(&s.handle.native_ref))
            .count()
    }

    pub fn live_handle_count(&self) -> usize {
        let st = self.state.lock().unwrap();
        st.slots.len() - st.retired.len()
    }

    pub fn teardown_log(&self) -> Vec<String> {
        self.state.lock().unwrap().teardowns.clone()
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn provision(&self, payload: &LaunchPayload) -> Result<ProvisionHandle, BackendError> {
        if self.unreachable.load(Ordering::SeqCst) {
            return Err(BackendError::BackendUnavailable(self.id.clone()));
        }
        let key = (payload.entry_id.clone(), payload.attempt);
        let mut st = self.state.lock().unwrap();
        if let Some(existing) = st.by_key.get(&key) {
            return Ok(st.slots[existing].handle.clone());
        }
        let n = self.next_ref.fetch_add(1, Ordering::SeqCst);
        let native_ref = format!("mock:{}:{n}", self.id);
        let endpoint = payload.web_entry.then(|| {
            self.endpoint
                .lock()
                .unwrap()
                .clone()
                .unwrap_or_else(|| Endpoint::new("127.0.0.1", 9))
        });
        let sidecar_refs = payload
            .sidecars
            .iter()
            .map(|s| format!("{native_ref}/{}", s.name))
            .collect();
        let handle = ProvisionHandle {
            backend_id: self.id.clone(),
            entry_id: payload.entry_id.clone(),
            native_ref: native_ref.clone(),
            endpoint,
            sidecar_refs,
        };
        let script = self
            .scripts
            .lock()
            .unwrap()
            .script_for(&payload.service.name, payload.attempt);
        st.slots.insert(
            native_ref.clone(),
            Slot {
                handle: handle.clone(),
                script,
                cursor: 0,
                sticky: None,
            },
        );
        st.by_key.insert(key, native_ref);
        *st.provisions_by_entry
            .entry(payload.entry_id.clone())
            .or_default() += 1;
        Ok(handle)
    }

    async fn probe(&self, handle: &ProvisionHandle) -> Result<Observation, BackendError> {
        let now = self.clock.now_ms();
        if self.unreachable.load(Ordering::SeqCst) {
            return Ok(Observation::new(Phase::Unknown, "backend unreachable", now));
        }
        let mut st = self.state.lock().unwrap();
        if st.retired.contains(&handle.native_ref) {
            return Ok(Observation::new(Phase::Unknown, "handle retired", now));
        }
        let slot = st
            .slots
            .get_mut(&handle.native_ref)
            .ok_or_else(|| BackendError::UnknownHandle(handle.native_ref.clone()))?;
        let phase = match slot.sticky {
            Some(p) => p,
            None => {
                let i = slot.cursor.min(slot.script.len().saturating_sub(1));
                let p = slot.script.get(i).copied().unwrap_or(Phase::Running);
                slot.cursor += 1;
                if p.is_final() {
                    slot.sticky = Some(p);
                }
                p
            }
        };
        Ok(Observation::new(phase, "scripted", now))
    }

    async fn teardown(&self, handle: &ProvisionHandle) {
        let mut st = self.state.lock().unwrap();
        if st.slots.contains_key(&handle.native_ref) && st.retired.insert(handle.native_ref.clone())
        {
            st.teardowns.push(handle.native_ref.clone());
            for sidecar in &handle.sidecar_refs {
                st.teardowns.push(sidecar.clone());
            }
        }
    }
}
