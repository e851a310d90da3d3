//! Identity verification and event tokens.
//!
//! Credentials are checked on every request and never stored. What the
//! engine hands to workloads and browsers is an event-scoped token signed
//! with a key kept in the data directory.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use conductor_core::{Claims, Identity, SigningKey, TokenError, TokenKind};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Lifetime of tokens handed to users.
pub const SESSION_TTL_MS: u64 = 12 * 60 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("invalid credential")]
    InvalidCredential,
    #[error("identity provider unavailable: {0}")]
    ProviderUnavailable(String),
}

/// A pluggable source of identities.
pub trait IdentityProvider: Send + Sync {
    fn id(&self) -> &str;

    /// Returns `(subject, display_name)` for a valid credential.
    fn authenticate(&self, credential: &[u8]) -> Result<(String, String), AuthError>;

    /// Display name of a known subject, used when sharing by subject.
    fn display_name(&self, _subject: &str) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticUser {
    pub credential: String,
    pub subject: String,
    #[serde(default)]
    pub display_name: Option<String>,
}

/// Credentials file of the static provider (YAML or JSON).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialsFile {
    #[serde(default = "default_provider_id")]
    pub provider: String,
    pub users: Vec<StaticUser>,
}

fn default_provider_id() -> String {
    "static".into()
}

/// Maps fixed credential strings to identities. For tests and desk use.
#[derive(Debug, Clone)]
pub struct StaticProvider {
    id: String,
    by_credential: HashMap<String, (String, String)>,
}

impl StaticProvider {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.into(),
            by_credential: HashMap::new(),
        }
    }

    pub fn with_user(mut self, credential: &str, subject: &str, display_name: &str) -> Self {
        self.by_credential
            .insert(credential.into(), (subject.into(), display_name.into()));
        self
    }

    pub fn from_file(file: CredentialsFile) -> Self {
        file.users
            .into_iter()
            .fold(Self::new(&file.provider), |p, u| {
                let display = u.display_name.unwrap_or_else(|| u.subject.clone());
                p.with_user(&u.credential, &u.subject, &display)
            })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: CredentialsFile = serde_yaml::from_str(&text)?;
        Ok(Self::from_file(file))
    }
}

impl IdentityProvider for StaticProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn authenticate(&self, credential: &[u8]) -> Result<(String, String), AuthError> {
        let credential =
            std::str::from_utf8(credential).map_err(|_| AuthError::InvalidCredential)?;
        self.by_credential
            .get(credential)
            .cloned()
            .ok_or(AuthError::InvalidCredential)
    }

    fn display_name(&self, subject: &str) -> Option<String> {
        self.by_credential
            .values()
            .find(|(s, _)| s == subject)
            .map(|(_, d)| d.clone())
    }
}

pub struct Authz {
    providers: Vec<Arc<dyn IdentityProvider>>,
    key: SigningKey,
}

impl Authz {
    pub fn new(providers: Vec<Arc<dyn IdentityProvider>>, key: SigningKey) -> Self {
        Self { providers, key }
    }

    /// Tries each provider in order.
    pub fn authenticate(&self, credential: &str) -> Result<Identity, AuthError> {
        let mut unavailable = None;
        for p in &self.providers {
            match p.authenticate(credential.as_bytes()) {
                Ok((subject, display)) => return Ok(Identity::new(p.id(), &subject, &display)),
                Err(AuthError::ProviderUnavailable(m)) => unavailable = Some(m),
                Err(AuthError::InvalidCredential) => {}
            }
        }
        Err(unavailable.map_or(AuthError::InvalidCredential, AuthError::ProviderUnavailable))
    }

    /// Identity for `subject` at `provider` (the first provider when absent).
    pub fn identity_for(&self, subject: &str, provider: Option<&str>) -> Identity {
        let p = match provider {
            Some(id) => self.providers.iter().find(|p| p.id() == id),
            None => self.providers.first(),
        };
        let provider_id = provider
            .map(String::from)
            .or_else(|| p.map(|p| p.id().to_string()))
            .unwrap_or_default();
        let display = p
            .and_then(|p| p.display_name(subject))
            .unwrap_or_else(|| subject.to_string());
        Identity::new(&provider_id, subject, &display)
    }

    pub fn mint(&self, event_id: &str, kind: TokenKind, expires_at: u64) -> String {
        self.key.mint(&Claims {
            scope_event: event_id.into(),
            kind,
            expires_at,
        })
    }

    pub fn verify(&self, token: &str, now_ms: u64) -> Result<Claims, TokenError> {
        self.key.verify(token, now_ms)
    }
}

/// Reads the signing key from `path`, creating a random one on first use.
pub fn load_or_create_key(path: &Path) -> io::Result<SigningKey> {
    match fs::read_to_string(path) {
        Ok(text) => {
            let bytes = hex::decode(text.trim())
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            Ok(SigningKey::new(bytes))
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            let mut bytes = [0u8; 32];
            rand::rng().fill_bytes(&mut bytes);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, hex::encode(bytes))?;
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
            }
            Ok(SigningKey::new(bytes.to_vec()))
        }
        Err(e) => Err(e),
    }
}
