use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use conductor_core::LaunchPayload;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Observation, Phase, ProvisionHandle};
use crate::clock::{Clock, SystemClock};
use crate::records::Endpoint;
use crate::wire::REDACTED;

/// Contents of `runs/<entry_id>/meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub entry_id: String,
    pub attempt: u32,
    pub service: String,
    pub pid: u32,
    pub command: Vec<String>,
    /// Process environment as launched, secret values redacted.
    pub env: BTreeMap<String, String>,
    pub endpoint: Option<Endpoint>,
    pub sidecars: Vec<SidecarMeta>,
    pub started_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarMeta {
    pub name: String,
    pub pid: u32,
    pub command: Vec<String>,
    pub port: Option<u16>,
}

struct Proc {
    main: Child,
    sidecars: Vec<Child>,
    ports: Vec<u16>,
}

/// Processes launched by an earlier engine instance, found through `meta.json`.
struct Adopted {
    main: (u32, Vec<String>),
    sidecars: Vec<(u32, Vec<String>)>,
    ports: Vec<u16>,
}

#[derive(Default)]
struct LocalState {
    procs: HashMap<String, Proc>,
    adopted: HashMap<String, Adopted>,
    handles: HashMap<String, ProvisionHandle>,
    by_key: HashMap<(String, u32), String>,
    retired: HashSet<String>,
    ports: HashSet<u16>,
}

/// Runs each entry as a plain child process in its own working directory.
///
/// Command arguments may use `{{port}}` (the entry's allocated host port),
/// `{{main_port}}` (same, for sidecars) and `{{self}}` (the conductor
/// executable). Children start from an empty environment plus `PATH`, the
/// rendered env and `PORT`.
///
/// Workloads outlive an engine crash. A handle this instance did not launch is
/// adopted when `runs/<entry>/meta.json` names the same attempt and pid and
/// that pid still runs the recorded command line.
pub struct LocalProcessBackend {
    id: String,
    runs_dir: PathBuf,
    self_exe: PathBuf,
    state: Mutex<LocalState>,
    clock: Arc<dyn Clock>,
}

impl LocalProcessBackend {
    pub fn new(id: &str, runs_dir: impl Into<PathBuf>, self_exe: impl Into<PathBuf>) -> Self {
        Self::with_clock(id, runs_dir, self_exe, Arc::new(SystemClock))
    }

    pub fn with_clock(
        id: &str,
        runs_dir: impl Into<PathBuf>,
        self_exe: impl Into<PathBuf>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            id: id.into(),
            runs_dir: runs_dir.into(),
            self_exe: self_exe.into(),
            state: Mutex::new(LocalState::default()),
            clock,
        }
    }

    pub fn runs_dir(&self) -> &Path {
        &self.runs_dir
    }

    pub fn run_dir(&self, entry_id: &str) -> PathBuf {
        self.runs_dir.join(entry_id)
    }

    /// Process id of the entry's main workload, if it is tracked.
    pub fn pid_of(&self, handle: &ProvisionHandle) -> Option<u32> {
        let st = self.state.lock().unwrap();
        st.procs.get(&handle.native_ref).map(|p| p.main.id())
    }

    fn free_port(st: &mut LocalState) -> Result<u16, BackendError> {
        for _ in 0..32 {
            let port = TcpListener::bind(("127.0.0.1", 0))
                .and_then(|l| l.local_addr())
                .map_err(|e| BackendError::LaunchFailed(format!("no free port: {e}")))?
                .port();
            if st.ports.insert(port) {
                return Ok(port);
            }
        }
        Err(BackendError::LaunchFailed("no free port".into()))
    }

    fn expand(&self, args: &[String], port: Option<u16>, main_port: Option<u16>) -> Vec<String> {
        let exe = self.self_exe.to_string_lossy();
        args.iter()
            .map(|a| {
                let mut a = a.replace("{{self}}", &exe);
                if let Some(p) = port {
                    a = a.replace("{{port}}", &p.to_string());
                }
                if let Some(p) = main_port {
                    a = a.replace("{{main_port}}", &p.to_string());
                }
                a
            })
            .collect()
    }

    fn spawn(
        &self,
        dir: &Path,
        log_prefix: &str,
        argv: &[String],
        env: &BTreeMap<String, String>,
    ) -> Result<Child, BackendError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| BackendError::LaunchFailed("empty command".into()))?;
        let open = |name: String| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(name))
                .map_err(|e| BackendError::LaunchFailed(format!("log file: {e}")))
        };
        let stdout = open(format!("{log_prefix}stdout.log"))?;
        let stderr = open(format!("{log_prefix}stderr.log"))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .env_clear()
            .envs(env)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr);
        if let Some(path) = std::env::var_os("PATH") {
            cmd.env("PATH", path);
        }
        cmd.spawn()
            .map_err(|e| BackendError::LaunchFailed(format!("spawn {program}: {e}")))
    }

    fn kill(proc: &mut Proc) {
        for child in std::iter::once(&mut proc.main).chain(proc.sidecars.iter_mut()) {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    fn kill_adopted(adopted: &Adopted) {
        for (pid, command) in std::iter::once(&adopted.main).chain(&adopted.sidecars) {
            if runs_command(*pid, command) {
                // SAFETY: kill(2) has no memory effects; the pid was checked just above.
                unsafe { libc::kill(*pid as libc::pid_t, libc::SIGKILL) };
            }
        }
    }

    /// Registers a handle from an earlier engine instance if its record still matches.
    fn adopt(&self, st: &mut LocalState, handle: &ProvisionHandle) -> bool {
        if st.handles.contains_key(&handle.native_ref) {
            return true;
        }
        let Some((entry_id, attempt, pid)) = parse_native_ref(&handle.native_ref) else {
            return false;
        };
        if entry_id != handle.entry_id {
            return false;
        }
        let Ok(bytes) = fs::read(self.run_dir(entry_id).join("meta.json")) else {
            return false;
        };
        let Ok(meta) = serde_json::from_slice::<RunMeta>(&bytes) else {
            return false;
        };
        if meta.entry_id != entry_id || meta.attempt != attempt || meta.pid != pid {
            return false;
        }
        let ports: Vec<u16> = meta
            .endpoint
            .iter()
            .map(|e| e.port)
            .chain(meta.sidecars.iter().filter_map(|s| s.port))
            .collect();
        st.ports.extend(&ports);
        st.adopted.insert(
            handle.native_ref.clone(),
            Adopted {
                main: (meta.pid, meta.command),
                sidecars: meta
                    .sidecars
                    .into_iter()
                    .map(|s| (s.pid, s.command))
                    .collect(),
                ports,
            },
        );
        st.handles.insert(handle.native_ref.clone(), handle.clone());
        st.by_key
            .insert((entry_id.to_string(), attempt), handle.native_ref.clone());
        true
    }
}

/// Splits `local:<entry>:<attempt>:<pid>`.
fn parse_native_ref(native_ref: &str) -> Option<(&str, u32, u32)> {
    let mut parts = native_ref.strip_prefix("local:")?.split(':');
    let entry = parts.next()?;
    let attempt = parts.next()?.parse().ok()?;
    let pid = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((entry, attempt, pid))
}

/// True while `pid` is a live process whose argv equals `command`.
#[cfg(target_os = "linux")]
fn runs_command(pid: u32, command: &[String]) -> bool {
    let Ok(raw) = fs::read(format!("/proc/{pid}/cmdline")) else {
        return false;
    };
    let argv: Vec<&[u8]> = raw
        .strip_suffix(&[0])
        .unwrap_or(&raw)
        .split(|b| *b == 0)
        .collect();
    !raw.is_empty()
        && argv.len() == command.len()
        && argv.iter().zip(command).all(|(a, c)| *a == c.as_bytes())
}

/// Without procfs a pid cannot be tied to its command, so nothing is adopted alive.
#[cfg(not(target_os = "linux"))]
fn runs_command(_pid: u32, _command: &[String]) -> bool {
    false
}

impl Drop for LocalProcessBackend {
    fn drop(&mut self) {
        if let Ok(mut st) = self.state.lock() {
            for proc in st.procs.values_mut() {
                Self::kill(proc);
            }
            for adopted in st.adopted.values() {
                Self::kill_adopted(adopted);
            }
        }
    }
}

#[async_trait]
impl Backend for LocalProcessBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn provision(&self, payload: &LaunchPayload) -> Result<ProvisionHandle, BackendError> {
        let key = (payload.entry_id.clone(), payload.attempt);
        let mut st = self.state.lock().unwrap();
        if let Some(existing) = st.by_key.get(&key) {
            return Ok(st.handles[existing].clone());
        }

        let dir = self.run_dir(&payload.entry_id);
        fs::create_dir_all(&dir)
            .map_err(|e| BackendError::LaunchFailed(format!("run dir: {e}")))?;

        let mut ports = Vec::new();
        let main_port = if payload.ports.is_empty() {
            None
        } else {
            let p = Self::free_port(&mut st)?;
            ports.push(p);
            Some(p)
        };
        let mut env = payload.resolved_env.clone();
        if let Some(p) = main_port {
            env.insert("PORT".into(), p.to_string());
        }
        let argv = self.expand(&payload.command, main_port, main_port);
        let main = match self.spawn(&dir, "", &argv, &env) {
            Ok(c) => c,
            Err(e) => {
                for p in &ports {
                    st.ports.remove(p);
                }
                return Err(e);
            }
        };
        let mut proc = Proc {
            main,
            sidecars: Vec::new(),
            ports,
        };

        let mut sidecar_meta = Vec::new();
        for sidecar in &payload.sidecars {
            let port = if sidecar.ports.is_empty() {
                None
            } else {
                match Self::free_port(&mut st) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        Self::kill(&mut proc);
                        return Err(e);
                    }
                }
            };
            let mut senv = env.clone();
            if let Some(p) = port {
                senv.insert("PORT".into(), p.to_string());
                proc.ports.push(p);
            }
            if let Some(p) = main_port {
                senv.insert("MAIN_PORT".into(), p.to_string());
            }
            let sargv = self.expand(&sidecar.command, port, main_port);
            match self.spawn(&dir, &format!("{}.", sidecar.name), &sargv, &senv) {
                Ok(child) => {
                    sidecar_meta.push(SidecarMeta {
                        name: sidecar.name.clone(),
                        pid: child.id(),
                        command: sargv,
                        port,
                    });
                    proc.sidecars.push(child);
                }
                Err(e) => {
                    Self::kill(&mut proc);
                    for p in &proc.ports {
                        st.ports.remove(p);
                    }
                    return Err(e);
                }
            }
        }

        let pid = proc.main.id();
        let native_ref = format!("local:{}:{}:{pid}", payload.entry_id, payload.attempt);
        let endpoint = main_port.map(|p| Endpoint::new("127.0.0.1", p));
        let mut shown_env = env.clone();
        for key in &payload.secret_env {
            if let Some(v) = shown_env.get_mut(key) {
                *v = REDACTED.into();
            }
        }
        let meta = RunMeta {
            entry_id: payload.entry_id.clone(),
            attempt: payload.attempt,
            service: payload.service.to_string(),
            pid,
            command: argv,
            env: shown_env,
            endpoint: endpoint.clone(),
            sidecars: sidecar_meta,
            started_at: self.clock.now_ms(),
        };
        let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        if let Err(e) = fs::write(dir.join("meta.json"), meta_json) {
            Self::kill(&mut proc);
            return Err(BackendError::LaunchFailed(format!("meta.json: {e}")));
        }

        let handle = ProvisionHandle {
            backend_id: self.id.clone(),
            entry_id: payload.entry_id.clone(),
            native_ref: native_ref.clone(),
            endpoint,
            sidecar_refs: meta
                .sidecars
                .iter()
                .map(|s| format!("{native_ref}/{}:{}", s.name, s.pid))
                .collect(),
        };
        st.procs.insert(native_ref.clone(), proc);
        st.handles.insert(native_ref.clone(), handle.clone());
        st.by_key.insert(key, native_ref);
        Ok(handle)
    }

    async fn probe(&self, handle: &ProvisionHandle) -> Result<Observation, BackendError> {
        let now = self.clock.now_ms();
        let exited = {
            let mut st = self.state.lock().unwrap();
            if st.retired.contains(&handle.native_ref) {
                return Ok(Observation::new(Phase::Unknown, "handle retired", now));
            }
            if !st.procs.contains_key(&handle.native_ref) && !self.adopt(&mut st, handle) {
                return Err(BackendError::UnknownHandle(handle.native_ref.clone()));
            }
            if let Some(adopted) = st.adopted.get(&handle.native_ref) {
                let (pid, command) = &adopted.main;
                if !runs_command(*pid, command) {
                    return Ok(Observation::new(
                        Phase::Crashed,
                        "process gone while the engine was down",
                        now,
                    ));
                }
                None
            } else {
                st.procs
                    .get_mut(&handle.native_ref)
                    .expect("checked above")
                    .main
                    .try_wait()
                    .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?
            }
        };
        if let Some(status) = exited {
            let phase = if status.success() {
                Phase::ExitedOk
            } else {
                Phase::Crashed
            };
            return Ok(Observation::new(phase, status.to_string(), now));
        }
        let Some(endpoint) = &handle.endpoint else {
            return Ok(Observation::new(Phase::Running, "process alive", now));
        };
        let connect = tokio::net::TcpStream::connect((endpoint.host.as_str(), endpoint.port));
        match tokio::time::timeout(Duration::from_millis(250), connect).await {
            Ok(Ok(_)) => Ok(Observation::new(
                Phase::Running,
                "accepting connections",
                now,
            )),
            _ => Ok(Observation::new(Phase::Starting, "waiting for port", now)),
        }
    }

    fn release(&self) {
        let mut st = self.state.lock().unwrap();
        // Dropping a Child neither kills nor waits for it.
        st.procs.clear();
        st.adopted.clear();
    }

    async fn teardown(&self, handle: &ProvisionHandle) {
        let (proc, adopted) = {
            let mut st = self.state.lock().unwrap();
            if st.retired.contains(&handle.native_ref) || !self.adopt(&mut st, handle) {
                return;
            }
            st.retired.insert(handle.native_ref.clone());
            let proc = st.procs.remove(&handle.native_ref);
            if let Some(p) = &proc {
                for port in &p.ports {
                    st.ports.remove(port);
                }
            }
            let adopted = st.adopted.remove(&handle.native_ref);
            if let Some(a) = &adopted {
                for port in &a.ports {
                    st.ports.remove(port);
                }
            }
            (proc, adopted)
        };
        if let Some(adopted) = adopted {
            Self::kill_adopted(&adopted);
        }
        if let Some(mut proc) = proc {
            tokio::task::spawn_blocking(move || Self::kill(&mut proc))
                .await
                .ok();
        }
    }
}
