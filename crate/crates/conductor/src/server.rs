//! Running engine: REST API, hostname proxy and the reconcile loop.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use conductor_core::BackendDescriptor;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

use crate::api::{self, ApiState};
use crate::authz::{self, Authz, CredentialsFile, IdentityProvider, StaticProvider};
use crate::backends::Backend;
use crate::clock::{Clock, SystemClock};
use crate::config::Config;
use crate::ingress::{proxy_router, ProxyState};
use crate::lifecycle::{Engine, EngineOptions};
use crate::orchestrator::BackendFactory;
use crate::store::StoreOptions;

pub struct Server {
    pub engine: Arc<Engine>,
    pub api_addr: SocketAddr,
    pub proxy_addr: SocketAddr,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
    stop_workloads: bool,
}

impl Server {
    pub async fn start(cfg: Config) -> anyhow::Result<Self> {
        Self::start_with(cfg, Arc::new(SystemClock), Vec::new()).await
    }

    /// Starts with extra caller-built backend instances and a chosen clock.
    pub async fn start_with(
        cfg: Config,
        clock: Arc<dyn Clock>,
        instances: Vec<(BackendDescriptor, Arc<dyn Backend>)>,
    ) -> anyhow::Result<Self> {
        let api_listener = TcpListener::bind(cfg.listen)
            .await
            .with_context(|| format!("binding {}", cfg.listen))?;
        let proxy_listener = TcpListener::bind(cfg.proxy_listen)
            .await
            .with_context(|| format!("binding {}", cfg.proxy_listen))?;
        let api_addr = api_listener.local_addr()?;
        let proxy_addr = proxy_listener.local_addr()?;

        std::fs::create_dir_all(&cfg.data_dir)?;
        let authz = Arc::new(build_authz(&cfg)?);
        let self_exe = match &cfg.self_exe {
            Some(p) => p.clone(),
            None => std::env::current_exe()?,
        };
        let factory = BackendFactory {
            runs_dir: cfg.data_dir.join("runs"),
            self_exe,
            default_credential: cfg.delegate_credential.clone(),
            clock: clock.clone(),
        };
        let mut backends = instances;
        for reg in &cfg.backends {
            if backends.iter().any(|(d, _)| d.id == reg.descriptor.id) {
                continue;
            }
            backends.push((reg.descriptor.clone(), factory.build(reg)?));
        }
        let opts = EngineOptions {
            base_domain: cfg.base_domain.clone(),
            public_scheme: cfg.public_scheme.clone(),
            public_port: Some(cfg.public_port.unwrap_or(proxy_addr.port())),
            store: StoreOptions {
                durability: cfg.durability,
                ..StoreOptions::default()
            },
        };
        let engine = Engine::open(
            &cfg.data_dir.join("store"),
            opts,
            clock.clone(),
            authz.clone(),
            factory,
            backends,
        )?;
        let engine = Arc::new(engine);

        let (stop, stopped) = watch::channel(false);
        let mut api_router = api::router(ApiState {
            engine: engine.clone(),
            admins: Arc::new(cfg.admins.clone()),
        });
        if let Some(dir) = &cfg.dashboard_dir {
            api_router = api_router.nest_service("/ui", ServeDir::new(dir));
        }
        let proxy = proxy_router(ProxyState::new(engine.bindings().clone(), authz, clock));
        let tasks = vec![
            tokio::spawn(serve(api_listener, api_router, stopped.clone())),
            tokio::spawn(serve(proxy_listener, proxy, stopped.clone())),
            tokio::spawn(reconcile_loop(
                engine.clone(),
                Duration::from_millis(cfg.reconcile_interval_ms.max(10)),
                stopped,
            )),
        ];
        tracing::info!(%api_addr, %proxy_addr, "conductor listening");
        Ok(Self {
            engine,
            api_addr,
            proxy_addr,
            stop,
            tasks,
            stop_workloads: cfg.stop_workloads_on_shutdown,
        })
    }

    pub fn api_url(&self) -> String {
        format!("http://{}", self.api_addr)
    }

    /// Stops accepting requests, finishes the current sweep and returns.
    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
        if !self.stop_workloads {
            for (_, backend) in self.engine.orchestrator().instances() {
                backend.release();
            }
        }
    }

    /// Resolves when the process receives ctrl-c or SIGTERM, then shuts down.
    pub async fn run_until_signal(self) -> anyhow::Result<()> {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate())?;
            tokio::select! {
                r = tokio::signal::ctrl_c() => r?,
                _ = term.recv() => {}
            }
        }
        #[cfg(not(unix))]
        tokio::signal::ctrl_c().await?;
        self.shutdown().await;
        Ok(())
    }
}

fn build_authz(cfg: &Config) -> anyhow::Result<Authz> {
    let mut providers: Vec<Arc<dyn IdentityProvider>> = Vec::new();
    let mut users = cfg.users.clone();
    let mut provider_id = "static".to_string();
    if let Some(path) = &cfg.credentials_file {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: CredentialsFile = serde_yaml::from_str(&text)?;
        provider_id = file.provider;
        users.extend(file.users);
    }
    providers.push(Arc::new(StaticProvider::from_file(CredentialsFile {
        provider: provider_id,
        users,
    })));
    let key = authz::load_or_create_key(&cfg.data_dir.join("signing.key"))?;
    Ok(Authz::new(providers, key))
}

async fn serve(listener: TcpListener, router: axum::Router, mut stopped: watch::Receiver<bool>) {
    let shutdown = async move {
        let _ = stopped.wait_for(|s| *s).await;
    };
    if let Err(e) = axum::serve(listener, router)
        .with_graceful_shutdown(shutdown)
        .await
    {
        tracing::error!(error = %e, "listener failed");
    }
}

async fn reconcile_loop(
    engine: Arc<Engine>,
    interval: Duration,
    mut stopped: watch::Receiver<bool>,
) {
    loop {
        engine.reconcile().await;
        tokio::select! {
            _ = tokio::time::sleep(interval) => {}
            _ = engine.woken() => {}
            _ = stopped.wait_for(|s| *s) => return,
        }
    }
}
