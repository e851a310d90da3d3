//! Durable single-directory store: a snapshot plus an append-only journal.
//!
//! Layout of the data directory:
//!
//! ```text
//! snapshot.json              full State as of `last_seq` (absent until the first snapshot)
//! journal.jsonl              batches committed after the snapshot
//! journal-<seq>.jsonl        archived journals, kept for the transition log
//! ```
//!
//! Every journal line is `<checksum> <batch json>\n` where the checksum is
//! the first 16 hex digits of SHA-256 over the JSON. A batch is visible only
//! once its whole line is on disk; a torn or corrupt final line is dropped
//! on recovery, a bad line followed by good ones is reported as corruption.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use conductor_core::BackendDescriptor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::records::{
    service_key, EntryRecord, EventRecord, RouteBinding, ServiceStatus, StoredService,
    TransitionLogRecord,
};

const JOURNAL: &str = "journal.jsonl";
const SNAPSHOT: &str = "snapshot.json";
const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 1000;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("batch touches more than one event")]
    ConflictRetry,
    #[error("corrupt journal at seq {0}")]
    CorruptLog(u64),
    #[error("unsupported store format {0}")]
    Format(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub services: BTreeMap<String, StoredService>,
    pub backends: BTreeMap<String, BackendDescriptor>,
    pub events: BTreeMap<String, EventRecord>,
    pub entries: BTreeMap<String, EntryRecord>,
    pub bindings: BTreeMap<String, RouteBinding>,
    pub last_seq: u64,
    pub last_transition_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    PutService(StoredService),
    SetServiceStatus {
        name: String,
        version: String,
        status: ServiceStatus,
    },
    PutBackend(BackendDescriptor),
    PutEvent(EventRecord),
    PutEntry(EntryRecord),
    PutBinding(RouteBinding),
    RemoveBinding {
        hostname: String,
    },
    Transition(TransitionLogRecord),
}

impl Mutation {
    fn event_id(&self) -> Option<&str> {
        match self {
            Mutation::PutEvent(e) => Some(&e.id),
            Mutation::PutEntry(e) => Some(&e.event_id),
            Mutation::PutBinding(b) => Some(&b.event_id),
            Mutation::Transition(t) => Some(&t.event_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub seq: u64,
    pub ts: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
    pub mutations: Vec<Mutation>,
}

impl State {
    fn apply(&mut self, batch: &Batch) {
        for m in &batch.mutations {
            match m {
                Mutation::PutService(s) => {
                    self.services.insert(s.key(), s.clone());
                }
                Mutation::SetServiceStatus {
                    name,
                    version,
                    status,
                } => {
                    if let Some(s) = self.services.get_mut(&service_key(name, version)) {
                        s.status = *status;
                    }
                }
                Mutation::PutBackend(b) => {
                    self.backends.insert(b.id.clone(), b.clone());
                }
                Mutation::PutEvent(e) => {
                    self.events.insert(e.id.clone(), e.clone());
                }
                Mutation::PutEntry(e) => {
                    self.entries.insert(e.id.clone(), e.clone());
                }
                Mutation::PutBinding(b) => {
                    self.bindings.insert(b.hostname.clone(), b.clone());
                }
                Mutation::RemoveBinding { hostname } => {
                    self.bindings.remove(hostname);
                }
                Mutation::Transition(t) => {
                    self.last_transition_seq = self.last_transition_seq.max(t.seq);
                }
            }
        }
        self.last_seq = batch.seq;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Durability {
    /// fsync after every batch.
    #[default]
    Fsync,
    /// Flush to the OS only; for tests.
    Flush,
}

/// Simulated process death: the journal write that would cross
/// `crash_after_bytes` is cut short and every later commit fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPlan {
    pub crash_after_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub durability: Durability,
    pub snapshot_every: u64,
    pub fault: Option<FaultPlan>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            durability: Durability::Fsync,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            fault: None,
        }
    }
}

pub struct Store {
    dir: PathBuf,
    journal: File,
    state: State,
    opts: StoreOptions,
    written: u64,
    crashed: bool,
    transitions_since_snapshot: u64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format: u32,
    state: State,
}

fn checksum(json: &str) -> String {
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

fn encode_line(batch: &Batch) -> String {
    let json = serde_json::to_string(batch).expect("batches serialize");
    format!("{} {json}\n", checksum(&json))
}

fn decode_line(line: &str) -> Option<Batch> {
    let (sum, json) = line.split_once(' ')?;
    if checksum(json) != sum {
        return None;
    }
    serde_json::from_str(json).ok()
}

/// Result of scanning one journal file.
struct Scan {
    batches: Vec<Batch>,
    /// Byte offset where a torn tail starts, if any.
    torn_at: Option<u64>,
}

fn scan_journal(path: &Path) -> Result<Scan, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let mut batches: Vec<Batch> = Vec::new();
    let mut offset = 0usize;
    let mut torn_at = None;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        let (line, complete) = match rest.iter().position(|b| *b == b'\n') {
            Some(n) => (&rest[..n], true),
            None => (rest, false),
        };
        let next = offset + line.len() + usize::from(complete);
        let parsed = std::str::from_utf8(line).ok().and_then(decode_line);
        match parsed {
            Some(batch) if complete => batches.push(batch),
            _ => {
                if next < bytes.len() {
                    let seq = batches.last().map(|b| b.seq + 1).unwrap_or(0);
                    return Err(StoreError::CorruptLog(seq));
                }
                torn_at = Some(offset as u64);
            }
        }
        offset = next;
    }
    Ok(Scan { batches, torn_at })
}

fn archived_journals(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("journal-") && name.ends_with(".jsonl") {
            out.push(path);
        }
    }
    // Zero-padded sequence numbers sort lexicographically.
    out.sort();
    Ok(out)
}

fn load_snapshot(dir: &Path) -> Result<State, StoreError> {
    match fs::read(dir.join(SNAPSHOT)) {
        Ok(bytes) => {
            let snap: SnapshotFile = serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::Unavailable(format!("unreadable snapshot: {e}")))?;
            if snap.format != FORMAT_VERSION {
                return Err(StoreError::Format(snap.format));
            }
            Ok(snap.state)
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(State::default()),
        Err(e) => Err(e.into()),
    }
}

fn replay(mut state: State, batches: &[Batch]) -> Result<State, StoreError> {
    for batch in batches {
        if batch.seq <= state.last_seq {
            continue;
        }
        if batch.seq != state.last_seq + 1 {
            return Err(StoreError::CorruptLog(batch.seq));
        }
        state.apply(batch);
    }
    Ok(state)
}

/// Reconstructs state from the directory without modifying it.
pub fn load_state(dir: &Path) -> Result<State, StoreError> {
    let state = load_snapshot(dir)?;
    let scan = scan_journal(&dir.join(JOURNAL))?;
    replay(state, &scan.batches)
}

/// Every transition ever committed, in commit order, across archived journals.
pub fn read_transition_log(dir: &Path) -> Result<Vec<TransitionLogRecord>, StoreError> {
    let mut files = archived_journals(dir)?;
    files.push(dir.join(JOURNAL));
    let mut out = Vec::new();
    let mut last_seq = 0;
    for file in files {
        for batch in scan_journal(&file)?.batches {
            // An archive and the live journal can overlap after an interrupted rotation.
            if batch.seq <= last_seq {
                continue;
            }
            last_seq = batch.seq;
            for m in batch.mutations {
                if let Mutation::Transition(t) = m {
                    out.push(t);
                }
            }
        }
    }
    Ok(out)
}

impl Store {
    /// Opens or creates the store in `dir`, recovering state by replay.
    pub fn open(dir: impl Into<PathBuf>, opts: StoreOptions) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let state = load_snapshot(&dir)?;
        let journal_path = dir.join(JOURNAL);
        let scan = scan_journal(&journal_path)?;
        let state = replay(state, &scan.batches)?;
        if let Some(at) = scan.torn_at {
            tracing::warn!(offset = at, "dropping torn journal tail");
            let f = OpenOptions::new().write(true).open(&journal_path)?;
            f.set_len(at)?;
            f.sync_all()?;
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)?;
        Ok(Self {
            dir,
            journal,
            state,
            opts,
            written: 0,
            crashed: false,
            transitions_since_snapshot: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    /// Atomically appends one batch. Transition records get gapless sequence
    /// numbers here; the returned value is the batch sequence number.
    pub fn commit(
        &mut self,
        ts: u64,
        event_id: Option<&str>,
        mut mutations: Vec<Mutation>,
    ) -> Result<u64, StoreError> {
        if self.crashed {
            return Err(StoreError::Unavailable("store crashed".into()));
        }
        if let Some(ev) = event_id {
            if mutations
                .iter()
                .any(|m| m.event_id().is_some_and(|id| id != ev))
            {
                return Err(StoreError::ConflictRetry);
            }
        } else if mutations.iter().any(|m| m.event_id().is_some()) {
            return Err(StoreError::ConflictRetry);
        }

        let mut transition_seq = self.state.last_transition_seq;
        let mut transitions = 0;
        for m in &mut mutations {
            if let Mutation::Transition(t) = m {
                transition_seq += 1;
                transitions += 1;
                t.seq = transition_seq;
            }
        }
        let batch = Batch {
            seq: self.state.last_seq + 1,
            ts,
            event_id: event_id.map(String::from),
            mutations,
        };
        let line = encode_line(&batch);
        self.write_line(line.as_bytes())?;
        self.state.apply(&batch);

        self.transitions_since_snapshot += transitions;
        if self.transitions_since_snapshot >= self.opts.snapshot_every {
            if let Err(e) = self.snapshot() {
                tracing::warn!(error = %e, "snapshot failed; journal keeps growing");
            }
        }
        Ok(batch.seq)
    }

    fn write_line(&mut self, line: &[u8]) -> Result<(), StoreError> {
        if let Some(plan) = self.opts.fault {
            let budget = plan.crash_after_bytes.saturating_sub(self.written);
            if (line.len() as u64) > budget {
                let partial = &line[..budget as usize];
                let _ = self.journal.write_all(partial);
                let _ = self.journal.flush();
                self.written += partial.len() as u64;
                self.crashed = true;
                return Err(StoreError::Unavailable("injected crash".into()));
            }
        }
        let result = self
            .journal
            .write_all(line)
            .and_then(|_| match self.opts.durability {
                Durability::Fsync => self.journal.sync_data(),
                Durability::Flush => self.journal.flush(),
            });
        if let Err(e) = result {
            self.crashed = true;
            return Err(StoreError::Unavailable(e.to_string()));
        }
        self.written += line.len() as u64;
        Ok(())
    }

    /// Writes a snapshot and rotates the journal into an archive.
    pub fn snapshot(&mut self) -> Result<(), StoreError> {
        let tmp = self.dir.join("snapshot.json.tmp");
        let body = serde_json::to_vec(&SnapshotFile {
            format: FORMAT_VERSION,
            state: self.state.clone(),
        })
        .expect("state serializes");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        let archive = self
            .dir
            .join(format!("journal-{:020}.jsonl", self.state.last_seq));
        fs::rename(self.dir.join(JOURNAL), &archive)?;
        self.journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(JOURNAL))?;
        self.transitions_since_snapshot = 0;
        Ok(())
    }
}

/// Reads journal lines from any reader; used by `admin` tooling.
pub fn read_batches(reader: impl io::Read) -> Vec<Batch> {
    BufReader::new(reader)
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| decode_line(&l))
        .collect()
}
