//! Engine configuration file (YAML or JSON).

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::authz::StaticUser;
use crate::store::Durability;
use crate::wire::BackendRegistration;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Where the hostname-routing proxy listens.
    #[serde(default = "default_proxy_listen")]
    pub proxy_listen: SocketAddr,
    #[serde(default = "default_base_domain")]
    pub base_domain: String,
    #[serde(default = "default_scheme")]
    pub public_scheme: String,
    /// Port shown in entry URLs; the proxy's bound port when absent.
    #[serde(default)]
    pub public_port: Option<u16>,
    pub data_dir: PathBuf,
    #[serde(default = "default_interval")]
    pub reconcile_interval_ms: u64,
    /// Static identity provider file; see `authz::CredentialsFile`.
    #[serde(default)]
    pub credentials_file: Option<PathBuf>,
    /// Inline users for the static provider, in addition to the file.
    #[serde(default)]
    pub users: Vec<StaticUser>,
    /// Subjects allowed to read `/admin/dump`.
    #[serde(default)]
    pub admins: BTreeSet<String>,
    /// Credential remote delegates use when registered without one.
    #[serde(default)]
    pub delegate_credential: Option<String>,
    #[serde(default)]
    pub durability: Durability,
    /// Stop local workloads on shutdown instead of leaving them for the next start.
    #[serde(default)]
    pub stop_workloads_on_shutdown: bool,
    /// Executable substituted for `{{self}}` in local-process commands.
    #[serde(default)]
    pub self_exe: Option<PathBuf>,
    /// Built dashboard assets, served under `/ui/` on the API listener.
    #[serde(default)]
    pub dashboard_dir: Option<PathBuf>,
    #[serde(default)]
    pub backends: Vec<BackendRegistration>,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:8080".parse().unwrap()
}

fn default_proxy_listen() -> SocketAddr {
    "127.0.0.1:8081".parse().unwrap()
}

fn default_base_domain() -> String {
    "sciorchestra.localhost".into()
}

fn default_scheme() -> String {
    "http".into()
}

fn default_interval() -> u64 {
    1000
}

impl Config {
    /// Defaults with ephemeral ports, for tests and demos.
    pub fn ephemeral(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen: "127.0.0.1:0".parse().unwrap(),
            proxy_listen: "127.0.0.1:0".parse().unwrap(),
            base_domain: default_base_domain(),
            public_scheme: default_scheme(),
            public_port: None,
            data_dir: data_dir.into(),
            reconcile_interval_ms: 200,
            credentials_file: None,
            users: Vec::new(),
            admins: BTreeSet::new(),
            delegate_credential: None,
            durability: Durability::Flush,
            stop_workloads_on_shutdown: true,
            self_exe: None,
            dashboard_dir: None,
            backends: Vec::new(),
        }
    }

    pub fn with_user(mut self, credential: &str, subject: &str) -> Self {
        self.users.push(StaticUser {
            credential: credential.into(),
            subject: subject.into(),
            display_name: None,
        });
        self
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Config = serde_yaml::from_str(&text)?;
        // Relative paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = base.join(&cfg.data_dir);
        if let Some(f) = &cfg.credentials_file {
            cfg.credentials_file = Some(base.join(f));
        }
        if let Some(d) = &cfg.dashboard_dir {
            cfg.dashboard_dir = Some(base.join(d));
        }
        Ok(cfg)
    }
}
