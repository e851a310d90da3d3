//! The engine's fleet: backend descriptors with their reservation ledger,
//! plus the live backend instances that execute entries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use conductor_core::placement::DescriptorError;
use conductor_core::{
    BackendDescriptor, BackendKind, Fleet, ResourceConstraints, Resources, RouteError,
};

use crate::backends::{Backend, LocalProcessBackend, MockBackend, RemoteDelegateBackend};
use crate::clock::Clock;
use crate::wire::BackendRegistration;

#[derive(Default)]
pub struct Orchestrator {
    fleet: Mutex<Fleet>,
    instances: RwLock<BTreeMap<String, Arc<dyn Backend>>>,
}

impl Orchestrator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a backend with no reservations.
    pub fn register(
        &self,
        mut desc: BackendDescriptor,
        instance: Arc<dyn Backend>,
    ) -> Result<BackendDescriptor, DescriptorError> {
        desc.allocated = Resources::default();
        let desc = self.fleet.lock().unwrap().register(desc)?.clone();
        self.instances
            .write()
            .unwrap()
            .insert(desc.id.clone(), instance);
        Ok(desc)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.fleet.lock().unwrap().get(id).is_some()
    }

    pub fn instance(&self, id: &str) -> Option<Arc<dyn Backend>> {
        self.instances.read().unwrap().get(id).cloned()
    }

    pub fn instances(&self) -> Vec<(String, Arc<dyn Backend>)> {
        self.instances
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn snapshot(&self) -> Vec<BackendDescriptor> {
        self.fleet.lock().unwrap().snapshot()
    }

    /// One atomic route-and-reserve decision.
    pub fn route_and_reserve(
        &self,
        constraints: &ResourceConstraints,
    ) -> Result<String, RouteError> {
        self.fleet.lock().unwrap().route_and_reserve(constraints)
    }

    pub fn reserve(&self, id: &str, request: &Resources) -> bool {
        self.fleet.lock().unwrap().reserve(id, request)
    }

    pub fn release(&self, id: &str, request: &Resources) {
        self.fleet.lock().unwrap().release(id, request);
    }

    pub fn reachability(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.fleet.lock().unwrap().reachability()
    }

    /// Pulls aggregate capacity from backends that advertise one.
    pub async fn refresh_capacity(&self) {
        for (id, backend) in self.instances() {
            if let Some(capacity) = backend.advertised_capacity().await {
                self.fleet.lock().unwrap().set_capacity(&id, capacity);
            }
        }
    }
}

/// Builds backend instances for descriptors registered at runtime or found
/// in the store without a configured instance.
pub struct BackendFactory {
    pub runs_dir: PathBuf,
    pub self_exe: PathBuf,
    /// Used by remote delegates registered without their own credential.
    pub default_credential: Option<String>,
    pub clock: Arc<dyn Clock>,
}

impl BackendFactory {
    pub fn build(&self, reg: &BackendRegistration) -> Result<Arc<dyn Backend>, DescriptorError> {
        let d = &reg.descriptor;
        Ok(match d.kind {
            BackendKind::Mock => Arc::new(MockBackend::with_clock(
                &d.id,
                reg.scripts.clone().unwrap_or_default(),
                self.clock.clone(),
            )),
            BackendKind::LocalProcess => Arc::new(LocalProcessBackend::with_clock(
                &d.id,
                self.runs_dir.clone(),
                self.self_exe.clone(),
                self.clock.clone(),
            )),
            BackendKind::RemoteDelegate => {
                let endpoint = d.endpoint.as_deref().ok_or(DescriptorError::Invalid(
                    "remote-delegate requires an endpoint",
                ))?;
                Arc::new(RemoteDelegateBackend::with_clock(
                    &d.id,
                    endpoint,
                    reg.credential
                        .clone()
                        .or_else(|| self.default_credential.clone()),
                    self.clock.clone(),
                ))
            }
        })
    }
}
