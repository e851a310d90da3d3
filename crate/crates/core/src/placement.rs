//! Backend selection under label and capacity constraints, plus relay
//! planning for producer/consumer pairs whose backends cannot talk directly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::ResourceConstraints;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resources {
    #[serde(default)]
    pub cpu_millicores: u64,
    #[serde(default)]
    pub memory_mib: u64,
    #[serde(default)]
    pub gpu_count: u64,
}

impl Resources {
    pub const fn new(cpu_millicores: u64, memory_mib: u64, gpu_count: u64) -> Self {
        Self {
            cpu_millicores,
            memory_mib,
            gpu_count,
        }
    }

    fn dims(&self) -> [u64; 3] {
        [self.cpu_millicores, self.memory_mib, self.gpu_count]
    }

    /// Componentwise `self <= other`.
    pub fn fits_within(&self, other: &Resources) -> bool {
        self.dims().iter().zip(other.dims()).all(|(a, b)| *a <= b)
    }

    pub fn saturating_add(&self, other: &Resources) -> Resources {
        Resources::new(
            self.cpu_millicores.saturating_add(other.cpu_millicores),
            self.memory_mib.saturating_add(other.memory_mib),
            self.gpu_count.saturating_add(other.gpu_count),
        )
    }

    pub fn saturating_sub(&self, other: &Resources) -> Resources {
        Resources::new(
            self.cpu_millicores.saturating_sub(other.cpu_millicores),
            self.memory_mib.saturating_sub(other.memory_mib),
            self.gpu_count.saturating_sub(other.gpu_count),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    LocalProcess,
    Mock,
    RemoteDelegate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub capacity: Resources,
    #[serde(default)]
    pub allocated: Resources,
    #[serde(default)]
    pub reachable: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DescriptorError {
    #[error("backend '{0}' already registered")]
    Duplicate(String),
    #[error("invalid backend descriptor: {0}")]
    Invalid(&'static str),
}

impl BackendDescriptor {
    pub fn new(id: &str, kind: BackendKind, labels: &[&str], capacity: Resources) -> Self {
        Self {
            id: id.into(),
            kind,
            labels: labels.iter().map(|l| String::from(*l)).collect(),
            capacity,
            allocated: Resources::default(),
            reachable: BTreeSet::from([String::from(id)]),
            endpoint: None,
        }
    }

    /// Checks invariants and makes `reachable` contain the backend itself.
    pub fn normalize(mut self) -> Result<Self, DescriptorError> {
        if self.id.is_empty() {
            return Err(DescriptorError::Invalid("id must not be empty"));
        }
        if self.kind == BackendKind::RemoteDelegate && self.endpoint.is_none() {
            return Err(DescriptorError::Invalid(
                "remote-delegate requires an endpoint",
            ));
        }
        if !self.allocated.fits_within(&self.capacity) {
            return Err(DescriptorError::Invalid("allocated exceeds capacity"));
        }
        self.reachable.insert(self.id.clone());
        Ok(self)
    }

    pub fn free(&self) -> Resources {
        self.capacity.saturating_sub(&self.allocated)
    }

    pub fn satisfies_labels(&self, constraints: &ResourceConstraints) -> bool {
        constraints.required_labels.is_subset(&self.labels)
    }

    pub fn has_room_for(&self, request: &Resources) -> bool {
        request.fits_within(&self.free())
    }

    /// Max over dimensions with non-zero capacity of allocated/capacity, as an exact fraction.
    pub fn load(&self) -> LoadFraction {
        self.allocated
            .dims()
            .iter()
            .zip(self.capacity.dims())
            .filter(|(_, cap)| *cap > 0)
            .map(|(used, cap)| LoadFraction {
                num: *used,
                den: cap,
            })
            .max()
            .unwrap_or(LoadFraction { num: 0, den: 1 })
    }
}

/// `num / den` compared exactly by cross multiplication.
#[derive(Debug, Clone, Copy)]
pub struct LoadFraction {
    pub num: u64,
    pub den: u64,
}

impl PartialEq for LoadFraction {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for LoadFraction {}

impl PartialOrd for LoadFraction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LoadFraction {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("no backend carries the required labels")]
    NoMatchingBackend,
    #[error("no backend with the required labels has free capacity")]
    NoCapacity,
}

/// Picks the least loaded eligible backend, smallest id on ties.
///
/// Eligible means the backend's labels cover the required labels and its
/// free capacity covers the request in every dimension.
pub fn route<'a, I>(constraints: &ResourceConstraints, snapshot: I) -> Result<&'a str, RouteError>
where
    I: IntoIterator<Item = &'a BackendDescriptor>,
{
    let request = constraints.requested();
    let mut label_match = false;
    let mut best: Option<&BackendDescriptor> = None;
    for backend in snapshot {
        if !backend.satisfies_labels(constraints) {
            continue;
        }
        label_match = true;
        if !backend.has_room_for(&request) {
            continue;
        }
        best = match best {
            None => Some(backend),
            Some(cur) => match backend.load().cmp(&cur.load()) {
                Ordering::Less => Some(backend),
                Ordering::Equal if backend.id < cur.id => Some(backend),
                _ => Some(cur),
            },
        };
    }
    match best {
        Some(b) => Ok(b.id.as_str()),
        None if label_match => Err(RouteError::NoCapacity),
        None => Err(RouteError::NoMatchingBackend),
    }
}

/// Backends plus their reservations. Callers serialize access; one
/// `route_and_reserve` call is one atomic decision.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fleet {
    backends: BTreeMap<String, BackendDescriptor>,
}

impl Fleet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        desc: BackendDescriptor,
    ) -> Result<&BackendDescriptor, DescriptorError> {
        let desc = desc.normalize()?;
        if self.backends.contains_key(&desc.id) {
            return Err(DescriptorError::Duplicate(desc.id));
        }
        let id = desc.id.clone();
        Ok(self.backends.entry(id).or_insert(desc))
    }

    pub fn get(&self, id: &str) -> Option<&BackendDescriptor> {
        self.backends.get(id)
    }

    pub fn snapshot(&self) -> Vec<BackendDescriptor> {
        self.backends.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BackendDescriptor> {
        self.backends.values()
    }

    pub fn route_and_reserve(
        &mut self,
        constraints: &ResourceConstraints,
    ) -> Result<String, RouteError> {
        let id = String::from(route(constraints, self.backends.values())?);
        let request = constraints.requested();
        if let Some(b) = self.backends.get_mut(&id) {
            b.allocated = b.allocated.saturating_add(&request);
        }
        Ok(id)
    }

    /// Re-applies a reservation recorded elsewhere, e.g. while recovering.
    /// Returns false for an unknown backend.
    pub fn reserve(&mut self, id: &str, request: &Resources) -> bool {
        match self.backends.get_mut(id) {
            Some(b) => {
                b.allocated = b.allocated.saturating_add(request);
                true
            }
            None => false,
        }
    }

    pub fn release(&mut self, id: &str, request: &Resources) {
        if let Some(b) = self.backends.get_mut(id) {
            b.allocated = b.allocated.saturating_sub(request);
        }
    }

    /// Replaces a backend's advertised capacity, keeping its reservations.
    pub fn set_capacity(&mut self, id: &str, capacity: Resources) {
        if let Some(b) = self.backends.get_mut(id) {
            b.capacity = capacity;
        }
    }

    pub fn reachability(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.backends
            .values()
            .map(|b| (b.id.clone(), b.reachable.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub producer_entry: String,
    pub consumer_entry: String,
    pub relay_backend: String,
    pub forwarded_port: u16,
}

/// An entry's placement as seen by the bridge planner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeEndpoint {
    pub entry_id: String,
    pub backend_id: String,
    /// First exposed port of the entry, 0 when it exposes none.
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BridgeError {
    #[error("no single relay connects consumer '{consumer}' to producer '{producer}'")]
    UnbridgeablePair { consumer: String, producer: String },
    #[error("entry '{0}' has no placement")]
    UnknownEntry(String),
    #[error("backend '{0}' missing from the reachability map")]
    UnknownBackend(String),
}

/// Plans one single-hop relay per dependency whose producer is not directly
/// reachable from its consumer. `dependencies` are `(consumer, producer)` pairs.
pub fn plan_bridges(
    entries: &[BridgeEndpoint],
    dependencies: &[(String, String)],
    reachability: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Vec<BridgeSpec>, BridgeError> {
    let placed = |id: &str| {
        entries
            .iter()
            .find(|e| e.entry_id == id)
            .ok_or_else(|| BridgeError::UnknownEntry(id.into()))
    };
    let reach = |backend: &str| {
        reachability
            .get(backend)
            .ok_or_else(|| BridgeError::UnknownBackend(backend.into()))
    };

    let mut bridges = Vec::new();
    for (consumer_id, producer_id) in dependencies {
        let consumer = placed(consumer_id)?;
        let producer = placed(producer_id)?;
        let from_consumer = reach(&consumer.backend_id)?;
        reach(&producer.backend_id)?;
        if from_consumer.contains(&producer.backend_id) {
            continue;
        }
        // BTreeMap iteration gives the lexicographically smallest relay first.
        let relay = reachability
            .iter()
            .find(|(relay, relay_reach)| {
                from_consumer.contains(*relay) && relay_reach.contains(&producer.backend_id)
            })
            .map(|(relay, _)| relay.clone())
            .ok_or_else(|| BridgeError::UnbridgeablePair {
                consumer: consumer_id.clone(),
                producer: producer_id.clone(),
            })?;
        bridges.push(BridgeSpec {
            producer_entry: producer_id.clone(),
            consumer_entry: consumer_id.clone(),
            relay_backend: relay,
            forwarded_port: producer.port,
        });
    }
    Ok(bridges)
}
