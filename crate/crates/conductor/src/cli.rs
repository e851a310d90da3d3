//! Command-line client over the REST API, plus the `serve` and `demo`
//! entry points of the binary.
//!
//! Exit codes: 0 when the API answered 2xx, 1 for an API error, 2 when the
//! engine could not be reached.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use conductor_core::{FieldKind, Literal, ServiceSpec};
use reqwest::Method;
use serde::Deserialize;
use serde_json::Value;

use crate::client::{decode, ApiClient, ClientError, RawResponse};
use crate::records::ServiceStatus;
use crate::wire::{ErrorBody, EventView, ServiceView, ShareRequest, StartRequest, StartResponse};

pub const DEFAULT_URL: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(
    name = "conductor",
    version,
    about = "Launch, compose and share services on the conductor engine"
)]
pub struct Cli {
    /// Engine API base URL.
    #[arg(long, global = true, env = "CONDUCTOR_URL")]
    pub url: Option<String>,
    /// Bearer credential.
    #[arg(long, global = true, env = "CONDUCTOR_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Print API bodies as JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a service version from a YAML or JSON spec.
    Register {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    /// Launch a service in a new event, or in an existing one with --event.
    Start {
        service: String,
        /// Input value, repeatable: --in name=value
        #[arg(long = "in", value_name = "NAME=VALUE")]
        inputs: Vec<String>,
        #[arg(long)]
        event: Option<String>,
        #[arg(long = "version", value_name = "VERSION")]
        service_version: Option<String>,
        /// Block until the entry is running or has failed.
        #[arg(long)]
        wait: bool,
        /// Seconds to wait with --wait.
        #[arg(long, default_value_t = 120)]
        timeout: u64,
    },
    /// Show an event and its entries.
    Status { event: String },
    /// List events you are a member of.
    Events,
    /// Make another identity a member of an event.
    Share {
        event: String,
        subject: String,
        #[arg(long)]
        provider: Option<String>,
    },
    /// Terminate an event.
    Stop { event: String },
    /// Print a session token for an event's URLs.
    Token { event: String },
    /// List active service versions.
    Services,
    /// List registered backends with their capacity.
    Backends,
    /// Print the tool manifest.
    Manifest,
    /// Run the engine.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Operator tools.
    #[command(subcommand)]
    Admin(AdminCommand),
    /// Small workloads for trying the engine without images.
    #[command(subcommand)]
    Demo(DemoCommand),
}

#[derive(Debug, Subcommand)]
pub enum AdminCommand {
    /// Committed store state of a running engine.
    Dump,
    /// Print the transition log of a stopped engine's data directory.
    Transitions {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Print the OpenAPI document of the REST API.
    Openapi,
}

#[derive(Debug, Subcommand)]
pub enum DemoCommand {
    /// HTTP server answering every request with a JSON echo.
    EchoHttp {
        #[arg(long, env = "PORT")]
        port: u16,
    },
    /// Sleep, then exit with the given code.
    SleepExit {
        #[arg(long, default_value_t = 1000)]
        ms: u64,
        #[arg(long, default_value_t = 0)]
        code: i32,
    },
}

/// `~/.conductor/config`, TOML.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    url: Option<String>,
    token: Option<String>,
}

fn file_config(home: Option<&Path>) -> FileConfig {
    home.map(|h| h.join(".conductor").join("config"))
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| toml::from_str(&t).ok())
        .unwrap_or_default()
}

/// Flags and environment (already merged by clap) win over the file.
fn resolve(cli: &Cli, home: Option<&Path>) -> (String, Option<String>) {
    let file = file_config(home);
    let url = cli
        .url
        .clone()
        .or(file.url)
        .unwrap_or_else(|| DEFAULT_URL.into());
    (url, cli.token.clone().or(file.token))
}

pub async fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match &cli.command {
        Command::Serve { config } => serve(config).await,
        Command::Demo(DemoCommand::EchoHttp { port }) => {
            report(crate::demo::echo_http(*port).await)
        }
        Command::Demo(DemoCommand::SleepExit { ms, code }) => {
            crate::demo::sleep_exit(*ms, *code).await
        }
        _ => {
            let home = std::env::var_os("HOME").map(PathBuf::from);
            run(
                &cli,
                home.as_deref(),
                &mut std::io::stdout(),
                &mut std::io::stderr(),
            )
            .await
        }
    }
}

fn report(r: anyhow::Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

async fn serve(config: &Path) -> i32 {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    report(
        async {
            let cfg = crate::config::Config::load(config)?;
            let server = crate::server::Server::start(cfg).await?;
            println!("api {}", server.api_url());
            println!("proxy http://{}", server.proxy_addr);
            server.run_until_signal().await
        }
        .await,
    )
}

/// Runs a client command. Parses from `args` for tests.
pub async fn run_args(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    home: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli, home, out, err).await,
        Err(e) => {
            let _ = write!(err, "{e}");
            2
        }
    }
}

enum Failure {
    Api(u16, Option<ErrorBody>),
    Transport(String),
    Usage(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api { status, body } => Failure::Api(status, Some(body)),
            ClientError::Transport(m) => Failure::Transport(m),
            ClientError::Decode(m) => Failure::Usage(format!("unexpected response: {m}")),
        }
    }
}

pub async fn run(cli: &Cli, home: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (url, token) = resolve(cli, home);
    let client = ApiClient::new(&url, token);
    match execute(cli, &client, out).await {
        Ok(()) => 0,
        Err(Failure::Api(status, body)) => {
            match body {
                Some(b) => {
                    let _ = writeln!(err, "error: {} ({status}): {}", b.code, b.message);
                }
                None => {
                    let _ = writeln!(err, "error: HTTP {status}");
                }
            }
            1
        }
        Err(Failure::Transport(m)) => {
            let _ = writeln!(err, "error: cannot reach {url}: {m}");
            2
        }
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
    }
}

/// Sends one request; non-2xx becomes `Failure::Api`.
async fn call(
    client: &ApiClient,
    method: Method,
    path: &str,
    body: Option<Value>,
) -> Result<RawResponse, Failure> {
    let raw = client.raw(method, path, body.as_ref()).await?;
    if (200..300).contains(&raw.status) {
        Ok(raw)
    } else {
        let body = serde_json::from_slice(&raw.body).ok();
        Err(Failure::Api(raw.status, body))
    }
}

fn json_body<T: serde::Serialize>(v: &T) -> Option<Value> {
    Some(serde_json::to_value(v).expect("serializable body"))
}

fn print_raw(out: &mut dyn Write, raw: &RawResponse) {
    let _ = out.write_all(&raw.body);
    if !raw.body.ends_with(b"\n") {
        let _ = writeln!(out);
    }
}

async fn execute(cli: &Cli, client: &ApiClient, out: &mut dyn Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Register { file } => {
            let text = std::fs::read_to_string(file)
                .map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
            let spec: Value = serde_yaml::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
            let raw = call(client, Method::POST, "/services", json_body(&spec)).await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                let v: ServiceView = decode(raw)?;
                let _ = writeln!(out, "registered {}@{}", v.name, v.version);
            }
        }
        Command::Start {
            service,
            inputs,
            event,
            service_version,
            wait,
            timeout,
        } => {
            let inputs = if inputs.is_empty() {
                None
            } else {
                Some(coerce_inputs(client, service, service_version.as_deref(), inputs).await?)
            };
            let req = StartRequest {
                version: service_version.clone(),
                inputs,
                event_id: event.clone(),
                ..StartRequest::default()
            };
            let raw = call(
                client,
                Method::POST,
                &format!("/start/{service}"),
                json_body(&req),
            )
            .await?;
            let started: StartResponse = decode(raw.clone())?;
            if !wait {
                if cli.json {
                    print_raw(out, &raw);
                } else {
                    let _ = writeln!(out, "{}", started.event_id);
                }
                return Ok(());
            }
            let view = wait_for(client, &started, Duration::from_secs(*timeout)).await?;
            let entry = view.entry(&started.entry_id);
            if cli.json {
                let _ = writeln!(out, "{}", serde_json::to_string(&view).expect("view"));
            } else {
                let _ = writeln!(out, "{}", started.event_id);
                print_event(out, &view);
            }
            match entry {
                Some(e) if e.state == conductor_core::EntryState::Running => {}
                Some(e) => {
                    return Err(Failure::Usage(format!(
                        "entry {} ended {:?}{}",
                        e.id,
                        e.state,
                        e.last_error
                            .as_deref()
                            .map(|m| format!(": {m}"))
                            .unwrap_or_default()
                    )))
                }
                None => return Err(Failure::Usage("entry vanished from its event".into())),
            }
        }
        Command::Status { event } => {
            let raw = call(client, Method::GET, &format!("/events/{event}"), None).await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                print_event(out, &decode(raw)?);
            }
        }
        Command::Events => {
            let raw = call(client, Method::GET, "/events", None).await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                let events: Vec<EventView> = decode(raw)?;
                let rows = events
                    .iter()
                    .map(|e| {
                        vec![
                            e.id.clone(),
                            format!("{:?}", e.state),
                            e.owner.clone(),
                            e.entries.len().to_string(),
                        ]
                    })
                    .collect();
                table(out, &["EVENT", "STATE", "OWNER", "ENTRIES"], rows);
            }
        }
        Command::Share {
            event,
            subject,
            provider,
        } => {
            let req = ShareRequest {
                subject: subject.clone(),
                provider: provider.clone(),
            };
            let raw = call(
                client,
                Method::POST,
                &format!("/events/{event}/share"),
                json_body(&req),
            )
            .await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                let v: EventView = decode(raw)?;
                let _ = writeln!(out, "members: {}", v.members.join(", "));
            }
        }
        Command::Stop { event } => {
            let raw = call(client, Method::DELETE, &format!("/events/{event}"), None).await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                let v: EventView = decode(raw)?;
                let _ = writeln!(out, "{} {:?}", v.id, v.state);
            }
        }
        Command::Token { event } => {
            let raw = call(client, Method::GET, &format!("/events/{event}/token"), None).await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                let t: crate::wire::TokenResponse = decode(raw)?;
                let _ = writeln!(out, "{}", t.token);
            }
        }
        Command::Services => {
            let raw = call(client, Method::GET, "/services", None).await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                let services: Vec<ServiceView> = decode(raw)?;
                let rows = services
                    .iter()
                    .map(|s| {
                        vec![
                            s.name.clone(),
                            s.version.clone(),
                            format!("{:?}", s.status).to_lowercase(),
                            s.live_entry_count.to_string(),
                            s.spec.description.clone(),
                        ]
                    })
                    .collect();
                table(
                    out,
                    &["NAME", "VERSION", "STATUS", "LIVE", "DESCRIPTION"],
                    rows,
                );
            }
        }
        Command::Backends => {
            let raw = call(client, Method::GET, "/backends", None).await?;
            if cli.json {
                print_raw(out, &raw);
            } else {
                let backends: Vec<conductor_core::BackendDescriptor> = decode(raw)?;
                let rows = backends
                    .iter()
                    .map(|b| {
                        vec![
                            b.id.clone(),
                            serde_json::to_value(b.kind)
                                .ok()
                                .and_then(|v| v.as_str().map(String::from))
                                .unwrap_or_default(),
                            b.labels.iter().cloned().collect::<Vec<_>>().join(","),
                            format!(
                                "{}/{}m {}/{}Mi {}/{}gpu",
                                b.allocated.cpu_millicores,
                                b.capacity.cpu_millicores,
                                b.allocated.memory_mib,
                                b.capacity.memory_mib,
                                b.allocated.gpu_count,
                                b.capacity.gpu_count
                            ),
                        ]
                    })
                    .collect();
                table(out, &["ID", "KIND", "LABELS", "ALLOCATED/CAPACITY"], rows);
            }
        }
        Command::Manifest => {
            // The manifest is JSON by nature; both modes print the body.
            let raw = call(client, Method::GET, "/manifest", None).await?;
            print_raw(out, &raw);
        }
        Command::Admin(AdminCommand::Dump) => {
            let raw = call(client, Method::GET, "/admin/dump", None).await?;
            print_raw(out, &raw);
        }
        Command::Admin(AdminCommand::Transitions { data_dir }) => {
            let dir = data_dir.join("store");
            let log = crate::store::read_transition_log(&dir)
                .map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
            for r in log {
                let _ = writeln!(out, "{}", serde_json::to_string(&r).expect("record"));
            }
        }
        Command::Admin(AdminCommand::Openapi) => {
            let doc = crate::api::openapi();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("doc"));
        }
        Command::Serve { .. } | Command::Demo(_) => {
            return Err(Failure::Usage("not a client command".into()));
        }
    }
    Ok(())
}

/// Turns `name=value` pairs into typed inputs using the registered schema.
/// Unknown names are sent as text so the engine reports them.
async fn coerce_inputs(
    client: &ApiClient,
    service: &str,
    version: Option<&str>,
    pairs: &[String],
) -> Result<BTreeMap<String, Literal>, Failure> {
    let name = service.replace('_', "-");
    let services = client.services().await?;
    let spec: Option<&ServiceSpec> = match version {
        Some(v) if v != "latest" => services
            .iter()
            .find(|s| s.name == name && s.version == v)
            .map(|s| &s.spec),
        _ => services
            .iter()
            .filter(|s| s.name == name && s.status == ServiceStatus::Active)
            .max_by_key(|s| s.spec.parsed_version())
            .map(|s| &s.spec),
    };
    let mut out = BTreeMap::new();
    for pair in pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--in expects NAME=VALUE, got '{pair}'")))?;
        let kind = spec
            .and_then(|s| s.schema.input(k))
            .map_or(FieldKind::String, |f| f.kind);
        let value = kind.coerce(v).ok_or_else(|| {
            Failure::Usage(format!(
                "input '{k}': '{v}' is not a valid {}",
                kind.as_str()
            ))
        })?;
        out.insert(k.to_string(), value);
    }
    Ok(out)
}

async fn wait_for(
    client: &ApiClient,
    started: &StartResponse,
    timeout: Duration,
) -> Result<EventView, Failure> {
    use conductor_core::EntryState as S;
    let deadline = Instant::now() + timeout;
    loop {
        let view = client.event(&started.event_id).await?;
        let done = match view.entry(&started.entry_id) {
            Some(e) => {
                e.state == S::Running
                    || e.exhausted
                    || matches!(e.state, S::Stopped | S::Terminated)
            }
            None => true,
        };
        if done {
            return Ok(view);
        }
        if Instant::now() >= deadline {
            return Err(Failure::Usage(format!(
                "timed out after {}s waiting for {}",
                timeout.as_secs(),
                started.entry_id
            )));
        }
        tokio::time::sleep(Duration::from_millis(250)).await;
    }
}

fn print_event(out: &mut dyn Write, v: &EventView) {
    let _ = writeln!(out, "event {}  {:?}  owner {}", v.id, v.state, v.owner);
    let rows = v
        .entries
        .iter()
        .map(|e| {
            vec![
                e.id.clone(),
                format!("{}@{}", e.service, e.version),
                format!(
                    "{:?}{}",
                    e.state,
                    if e.exhausted { " (exhausted)" } else { "" }
                ),
                e.restart_count.to_string(),
                e.url.clone().unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    table(out, &["ENTRY", "SERVICE", "STATE", "RESTARTS", "URL"], rows);
}

fn table(out: &mut dyn Write, header: &[&str], rows: Vec<Vec<String>>) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i + 1 == cells.len() {
                s.push_str(c);
            } else {
                s.push_str(&format!("{c:<w$}  ", w = widths[i]));
            }
        }
        s
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    for r in &rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
}
