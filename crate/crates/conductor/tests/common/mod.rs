#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use conductor::authz::{Authz, StaticProvider};
use conductor::backends::{Backend, MockBackend, MockScripts};
use conductor::client::ApiClient;
use conductor::clock::Clock;
use conductor::config::Config;
use conductor::lifecycle::{Engine, EngineOptions};
use conductor::orchestrator::BackendFactory;
use conductor::server::Server;
use conductor::store::{Durability, StoreOptions};
use conductor::wire::{BackendRegistration, EntryView, EventView};
use conductor_core::{
    BackendDescriptor, BackendKind, FieldKind, FieldSpec, Identity, Literal, Resources,
    ServiceSpec, SigningKey,
};
use tempfile::TempDir;

pub const ALICE: &str = "alice-credential-7f3a91";
pub const BOB: &str = "bob-credential-c0ffee42";
pub const CAROL: &str = "carol-credential-5eed77";

pub fn conductor_exe() -> &'static str {
    env!("CARGO_BIN_EXE_conductor")
}

pub fn cap(cpu: u64, mem: u64, gpu: u64) -> Resources {
    Resources {
        cpu_millicores: cpu,
        memory_mib: mem,
        gpu_count: gpu,
    }
}

pub fn laptop() -> BackendRegistration {
    BackendRegistration {
        descriptor: BackendDescriptor::new(
            "laptop",
            BackendKind::LocalProcess,
            &["cpu", "web-ingress"],
            cap(16_000, 32_768, 0),
        ),
        credential: None,
        scripts: None,
    }
}

/// A web service that runs `conductor demo echo-http`.
pub fn echo_spec(name: &str, version: &str) -> ServiceSpec {
    let mut s = ServiceSpec::minimal(name, version);
    s.description = "HTTP echo".into();
    s.command = ["{{self}}", "demo", "echo-http", "--port", "{{port}}"]
        .map(String::from)
        .to_vec();
    s.ports = vec![8080];
    s.web_entry = true;
    s.constraints.required_labels.insert("web-ingress".into());
    s.constraints.cpu_millicores = 100;
    s.constraints.memory_mib = 64;
    s.schema.inputs = vec![FieldSpec::new("greeting", FieldKind::String)
        .with_default(Literal::Text("hello from echo".into()))];
    s.env_template
        .insert("GREETING".into(), "{{input.greeting}}".into());
    s
}

/// A web service consuming another entry's URL and the event token.
pub fn notebook_spec() -> ServiceSpec {
    let mut s = echo_spec("notebook", "1.0.0");
    s.schema.inputs = vec![
        FieldSpec::new("logging_url", FieldKind::Url).required(),
        FieldSpec::new("api_key", FieldKind::Secret),
    ];
    s.env_template = BTreeMap::from([
        ("LOGGING_URL".into(), "{{input.logging_url}}".into()),
        ("LOGGING_TOKEN".into(), "{{event.token}}".into()),
        ("API_KEY".into(), "{{input.api_key}}".into()),
    ]);
    s
}

pub struct Harness {
    pub dir: TempDir,
    pub server: Server,
    pub alice: ApiClient,
    pub bob: ApiClient,
    pub anon: ApiClient,
}

pub fn base_config(dir: &Path) -> Config {
    let mut cfg = Config::ephemeral(dir.join("data"))
        .with_user(ALICE, "alice")
        .with_user(BOB, "bob")
        .with_user(CAROL, "carol");
    cfg.admins.insert("alice".into());
    cfg.self_exe = Some(conductor_exe().into());
    cfg.reconcile_interval_ms = 100;
    cfg
}

impl Harness {
    pub async fn start(configure: impl FnOnce(&mut Config)) -> Self {
        Self::start_with(configure, Vec::new()).await
    }

    pub async fn start_with(
        configure: impl FnOnce(&mut Config),
        instances: Vec<(BackendDescriptor, Arc<dyn Backend>)>,
    ) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(dir.path());
        configure(&mut cfg);
        let server = Server::start_with(cfg, Arc::new(conductor::clock::SystemClock), instances)
            .await
            .unwrap();
        let url = server.api_url();
        Self {
            alice: ApiClient::new(&url, Some(ALICE.into())),
            bob: ApiClient::new(&url, Some(BOB.into())),
            anon: ApiClient::new(&url, None),
            dir,
            server,
        }
    }

    pub fn data_dir(&self) -> std::path::PathBuf {
        self.dir.path().join("data")
    }

    pub fn proxy(&self) -> SocketAddr {
        self.server.proxy_addr
    }
}

/// Polls until `done` holds for the entry, or panics after `timeout`.
pub async fn wait_entry(
    client: &ApiClient,
    event_id: &str,
    entry_id: &str,
    timeout: Duration,
    done: impl Fn(&EntryView) -> bool,
) -> EventView {
    let deadline = Instant::now() + timeout;
    loop {
        let view = client.event(event_id).await.unwrap();
        if view.entry(entry_id).is_some_and(&done) {
            return view;
        }
        if Instant::now() > deadline {
            panic!("timed out; last view: {view:#?}");
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

/// GETs an entry URL through the proxy by resolving its hostname locally.
pub async fn fetch(proxy: SocketAddr, url: &str, token: Option<&str>) -> (u16, String) {
    let parsed = reqwest::Url::parse(url).unwrap();
    let host = parsed.host_str().unwrap().to_string();
    let http = reqwest::Client::builder()
        .resolve(&host, proxy)
        .no_proxy()
        .build()
        .unwrap();
    let mut req = http.get(url);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.text().await.unwrap_or_default())
}

// ---- engine-level fixtures ----

pub fn authz() -> Arc<Authz> {
    let p = StaticProvider::new("static")
        .with_user(ALICE, "alice", "Alice")
        .with_user(BOB, "bob", "Bob")
        .with_user(CAROL, "carol", "Carol");
    Arc::new(Authz::new(
        vec![Arc::new(p)],
        SigningKey::new(*b"test-signing-key"),
    ))
}

pub fn alice() -> Identity {
    authz().authenticate(ALICE).unwrap()
}

pub fn bob() -> Identity {
    authz().authenticate(BOB).unwrap()
}

pub fn mock_descriptor(id: &str, labels: &[&str], capacity: Resources) -> BackendDescriptor {
    BackendDescriptor::new(id, BackendKind::Mock, labels, capacity)
}

pub fn fast_store() -> StoreOptions {
    StoreOptions {
        durability: Durability::Flush,
        ..StoreOptions::default()
    }
}

pub fn open_engine(
    dir: &Path,
    clock: Arc<dyn Clock>,
    store: StoreOptions,
    instances: Vec<(BackendDescriptor, Arc<dyn Backend>)>,
) -> Engine {
    let factory = BackendFactory {
        runs_dir: dir.join("runs"),
        self_exe: conductor_exe().into(),
        default_credential: None,
        clock: clock.clone(),
    };
    let opts = EngineOptions {
        store,
        ..EngineOptions::default()
    };
    Engine::open(&dir.join("store"), opts, clock, authz(), factory, instances).unwrap()
}

/// An engine with one mock backend labelled `cpu` and `web-ingress`.
pub fn mock_engine(
    dir: &Path,
    clock: Arc<dyn Clock>,
    scripts: MockScripts,
) -> (Engine, Arc<MockBackend>) {
    let mock = Arc::new(MockBackend::with_clock("mock", scripts, clock.clone()));
    let engine = open_engine(
        dir,
        clock,
        fast_store(),
        vec![(
            mock_descriptor("mock", &["cpu", "web-ingress"], cap(64_000, 1 << 20, 0)),
            mock.clone() as Arc<dyn Backend>,
        )],
    );
    (engine, mock)
}

/// A non-web service for mock-backend scenarios.
pub fn plain_spec(name: &str, restart_budget: u32) -> ServiceSpec {
    let mut s = ServiceSpec::minimal(name, "1.0.0");
    s.command = vec!["true".into()];
    s.policy.restart_budget = restart_budget;
    s.constraints.cpu_millicores = 10;
    s
}

/// Live and not a zombie; children of the test process linger as zombies once killed.
pub fn running(pid: u32) -> bool {
    std::fs::read_to_string(format!("/proc/{pid}/stat")).is_ok_and(|stat| {
        stat.rsplit_once(')')
            .is_some_and(|(_, rest)| !rest.trim_start().starts_with('Z'))
    })
}
