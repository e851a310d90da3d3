//! Service catalog lookups and per-service concurrency quotas.
//!
//! The catalog itself lives in the store; these functions read it. Quota
//! counters are in memory and rebuilt from the non-terminal entries on
//! recovery.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use conductor_core::{
    validate_service_spec, Admission, Limit, QuotaCounter, ServiceSpec, ValidationReport,
};

use crate::records::{service_key, ServiceStatus, StoredService};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Latest,
    Exact(String),
}

impl Selector {
    /// `None` and `"latest"` both mean the newest active version.
    pub fn parse(version: Option<&str>) -> Self {
        match version {
            None | Some("latest") | Some("") => Selector::Latest,
            Some(v) => Selector::Exact(v.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("{name}@{version} is already registered")]
    DuplicateVersion { name: String, version: String },
    #[error("invalid service spec: {0}")]
    InvalidSpec(ValidationReport),
    #[error("unknown service '{0}'")]
    UnknownService(String),
    #[error("unknown version {name}@{version}")]
    UnknownVersion { name: String, version: String },
    #[error("service '{0}' has no active version")]
    NoActiveVersion(String),
}

/// Checks that `spec` may be added to `services`.
pub fn check_registration(
    services: &BTreeMap<String, StoredService>,
    spec: &ServiceSpec,
) -> Result<(), RegistryError> {
    let report = validate_service_spec(spec);
    if !report.is_ok() {
        return Err(RegistryError::InvalidSpec(report));
    }
    if services.contains_key(&service_key(&spec.name, &spec.version)) {
        return Err(RegistryError::DuplicateVersion {
            name: spec.name.clone(),
            version: spec.version.clone(),
        });
    }
    Ok(())
}

/// Deprecated versions are skipped by `Latest` but still resolve exactly.
pub fn resolve<'a>(
    services: &'a BTreeMap<String, StoredService>,
    name: &str,
    selector: &Selector,
) -> Result<&'a StoredService, RegistryError> {
    let mut versions = services.values().filter(|s| s.spec.name == name).peekable();
    if versions.peek().is_none() {
        return Err(RegistryError::UnknownService(name.into()));
    }
    match selector {
        Selector::Exact(v) => {
            services
                .get(&service_key(name, v))
                .ok_or_else(|| RegistryError::UnknownVersion {
                    name: name.into(),
                    version: v.clone(),
                })
        }
        Selector::Latest => versions
            .filter(|s| s.status == ServiceStatus::Active)
            .max_by_key(|s| s.spec.parsed_version())
            .ok_or_else(|| RegistryError::NoActiveVersion(name.into())),
    }
}

/// Active records ordered by name, then numeric version.
pub fn active_sorted(services: &BTreeMap<String, StoredService>) -> Vec<&StoredService> {
    let mut out: Vec<_> = services
        .values()
        .filter(|s| s.status == ServiceStatus::Active)
        .collect();
    out.sort_by(|a, b| {
        (&a.spec.name, a.spec.parsed_version()).cmp(&(&b.spec.name, b.spec.parsed_version()))
    });
    out
}

/// Live-entry counters keyed by `name@version`. Admission is a single
/// check-and-increment under one lock.
#[derive(Debug, Default)]
pub struct Quotas {
    counters: Mutex<HashMap<String, QuotaCounter>>,
}

impl Quotas {
    pub fn admit(&self, key: &str, limit: Limit) -> Admission {
        let mut counters = self.counters.lock().unwrap();
        let c = counters
            .entry(key.into())
            .or_insert_with(|| QuotaCounter::new(limit));
        c.limit = limit;
        c.admit()
    }

    pub fn release(&self, key: &str) {
        if let Some(c) = self.counters.lock().unwrap().get_mut(key) {
            c.release();
        }
    }

    pub fn live(&self, key: &str) -> u32 {
        self.counters.lock().unwrap().get(key).map_or(0, |c| c.live)
    }

    /// Replaces all counters, e.g. after recovery.
    pub fn reset(&self, live: impl IntoIterator<Item = (String, Limit, u32)>) {
        let mut counters = self.counters.lock().unwrap();
        counters.clear();
        for (key, limit, n) in live {
            let mut c = QuotaCounter::new(limit);
            c.live = n;
            counters.insert(key, c);
        }
    }
}
