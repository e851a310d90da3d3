//! Acceptance scenarios, one line of output per criterion.
//!
//! Run with `cargo test -p conductor --test acceptance`; pass a criterion
//! number as an argument to run only that one.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use common::*;
use conductor::backends::{
    Backend, BackendError, LocalProcessBackend, MockBackend, MockScripts, Observation, Phase,
    ProvisionHandle, RunMeta,
};
use conductor::client::ApiClient;
use conductor::clock::ManualClock;
use conductor::lifecycle::Engine;
use conductor::orchestrator::Orchestrator;
use conductor::store::{read_transition_log, FaultPlan, StoreOptions};
use conductor::wire::{BackendRegistration, ShareRequest, StartRequest, ToolDescriptor};
use conductor_core::{
    derive_event_state, BackendKind, EntryState, EventState, FieldKind, FieldSpec, LaunchPayload,
    Literal, ResourceConstraints, Resources, RouteError, ServiceSpec, TokenKind,
};
use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, IteratorRandom};
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

type Outcome = anyhow::Result<String>;
type Criterion = fn() -> Pin<Box<dyn Future<Output = Outcome> + Send>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            anyhow::bail!($($msg)+);
        }
    };
}

fn running(e: &conductor::wire::EntryView) -> bool {
    e.state == EntryState::Running
}

// ---- 1 ----

async fn c1_end_to_end_launch() -> Outcome {
    let h = Harness::start(|c| c.backends.push(laptop())).await;
    h.alice
        .register_service(&echo_spec("echo", "1.0.0"))
        .await?;
    let t0 = Instant::now();
    let started = h.alice.start("echo", &StartRequest::default()).await?;
    let view = wait_entry(
        &h.alice,
        &started.event_id,
        &started.entry_id,
        Duration::from_secs(10),
        running,
    )
    .await;
    let elapsed = t0.elapsed();
    ensure!(elapsed <= Duration::from_secs(10), "took {elapsed:?}");
    ensure!(
        view.state == EventState::Active,
        "event state {:?}",
        view.state
    );
    let url = view.entry(&started.entry_id).unwrap().url.clone().unwrap();
    let token = h.alice.token(&started.event_id).await?.token;
    let (status, body) = fetch(h.proxy(), &url, Some(&token)).await;
    ensure!(status == 200, "with token: {status} {body}");
    let echoed: Value = serde_json::from_str(&body)?;
    ensure!(echoed["greeting"] == "hello from echo", "body {body}");
    let (status, _) = fetch(h.proxy(), &url, None).await;
    ensure!(status == 401, "without token: {status}");
    h.server.shutdown().await;
    Ok(format!(
        "Active after {:.2}s at {url}; 200 with token, 401 without",
        elapsed.as_secs_f64()
    ))
}

// ---- 2 ----

fn read_meta(data_dir: &Path, entry_id: &str) -> anyhow::Result<RunMeta> {
    let text = std::fs::read_to_string(data_dir.join("runs").join(entry_id).join("meta.json"))?;
    Ok(serde_json::from_str(&text)?)
}

async fn c2_composition() -> Outcome {
    let h = Harness::start(|c| c.backends.push(laptop())).await;
    let mut logging = echo_spec("logging", "1.0.0");
    logging
        .env_template
        .insert("LOGGING_TOKEN".into(), "{{event.token}}".into());
    h.alice.register_service(&logging).await?;
    h.alice.register_service(&notebook_spec()).await?;

    let a = h.alice.start("logging", &StartRequest::default()).await?;
    let view = wait_entry(
        &h.alice,
        &a.event_id,
        &a.entry_id,
        Duration::from_secs(10),
        running,
    )
    .await;
    let a_url = view.entry(&a.entry_id).unwrap().url.clone().unwrap();

    let req = StartRequest {
        event_id: Some(a.event_id.clone()),
        inputs: Some(BTreeMap::from([
            ("logging_url".into(), Literal::Text(a_url.clone())),
            (
                "api_key".into(),
                Literal::Text("sk-composition-secret".into()),
            ),
        ])),
        ..StartRequest::default()
    };
    let b = h.alice.start("notebook", &req).await?;
    ensure!(b.event_id == a.event_id, "B landed in event {}", b.event_id);
    let view = wait_entry(
        &h.alice,
        &a.event_id,
        &b.entry_id,
        Duration::from_secs(10),
        running,
    )
    .await;
    ensure!(
        view.entries.len() == 2,
        "{} entries under the event",
        view.entries.len()
    );
    ensure!(
        view.entry(&b.entry_id).unwrap().depends_on == vec![a.entry_id.clone()],
        "B depends_on {:?}",
        view.entry(&b.entry_id).unwrap().depends_on
    );

    let meta_a = read_meta(&h.data_dir(), &a.entry_id)?;
    let meta_b = read_meta(&h.data_dir(), &b.entry_id)?;
    ensure!(
        meta_b.env.get("LOGGING_URL") == Some(&a_url),
        "B env {:?}",
        meta_b.env
    );
    let token = meta_b.env.get("LOGGING_TOKEN").cloned().unwrap_or_default();
    ensure!(
        meta_a.env.get("LOGGING_TOKEN") == Some(&token),
        "A and B tokens differ"
    );
    let claims = h
        .server
        .engine
        .authz()
        .verify(&token, h.server.engine.clock().now_ms())
        .map_err(|e| anyhow::anyhow!("event token does not verify: {e}"))?;
    ensure!(
        claims.scope_event == a.event_id,
        "token scoped to {}",
        claims.scope_event
    );
    ensure!(
        claims.kind == TokenKind::EntryInjection,
        "token kind {:?}",
        claims.kind
    );
    ensure!(
        meta_b.env.get("API_KEY").map(String::as_str) == Some(conductor::wire::REDACTED),
        "secret not redacted in meta.json"
    );
    h.server.shutdown().await;
    Ok("B's env carries A's URL and the event token shared with A; 2 entries in one event".into())
}

// ---- 3 ----

fn fraction_lt(a: (u64, u64), b: (u64, u64)) -> bool {
    (a.0 as u128) * (b.1 as u128) < (b.0 as u128) * (a.1 as u128)
}

#[derive(Clone)]
struct OracleBackend {
    labels: BTreeSet<String>,
    cap: [u64; 3],
    used: [u64; 3],
}

impl OracleBackend {
    fn load(&self) -> (u64, u64) {
        let mut worst = (0, 1);
        for d in 0..3 {
            if self.cap[d] > 0 && fraction_lt(worst, (self.used[d], self.cap[d])) {
                worst = (self.used[d], self.cap[d]);
            }
        }
        worst
    }
}

/// Brute force: every eligible backend, then the least loaded, smallest id.
fn oracle_route(
    fleet: &BTreeMap<String, OracleBackend>,
    labels: &BTreeSet<String>,
    req: [u64; 3],
) -> (Vec<String>, Result<String, RouteError>) {
    let labelled: Vec<_> = fleet
        .iter()
        .filter(|(_, b)| labels.is_subset(&b.labels))
        .collect();
    let eligible: Vec<_> = labelled
        .iter()
        .filter(|(_, b)| (0..3).all(|d| b.used[d] + req[d] <= b.cap[d]))
        .collect();
    let ids: Vec<String> = eligible.iter().map(|(id, _)| id.to_string()).collect();
    if labelled.is_empty() {
        return (ids, Err(RouteError::NoMatchingBackend));
    }
    let mut best: Option<&(&String, &OracleBackend)> = None;
    for cand in &eligible {
        best = match best {
            None => Some(cand),
            Some(cur) => {
                let (lc, lb) = (cand.1.load(), cur.1.load());
                if fraction_lt(lc, lb) || (!fraction_lt(lb, lc) && cand.0 < cur.0) {
                    Some(cand)
                } else {
                    Some(cur)
                }
            }
        };
    }
    match best {
        Some((id, _)) => (ids, Ok(id.to_string())),
        None => (ids, Err(RouteError::NoCapacity)),
    }
}

async fn c3_routing_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xC3);
    let pool = ["cpu", "gpu", "web-ingress", "bigmem", "hpc"];
    let (mut decisions, mut placed, mut refused) = (0, 0, 0);
    for instance in 0..1000 {
        let orch = Orchestrator::new();
        let mut oracle: BTreeMap<String, OracleBackend> = BTreeMap::new();
        for _ in 0..rng.random_range(1..=6) {
            let id = format!("b{:02}", rng.random_range(0..40));
            if oracle.contains_key(&id) {
                continue;
            }
            let labels: Vec<&str> = pool
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.5))
                .collect();
            let cap = [
                rng.random_range(0..=8) * 1000,
                rng.random_range(0..=8) * 2048,
                rng.random_range(0..=4),
            ];
            let d = conductor_core::BackendDescriptor::new(
                &id,
                BackendKind::Mock,
                &labels,
                Resources {
                    cpu_millicores: cap[0],
                    memory_mib: cap[1],
                    gpu_count: cap[2],
                },
            );
            orch.register(d, Arc::new(MockBackend::new(&id, MockScripts::default())))?;
            oracle.insert(
                id,
                OracleBackend {
                    labels: labels.iter().map(|l| l.to_string()).collect(),
                    cap,
                    used: [0; 3],
                },
            );
        }
        let mut held: Vec<(String, [u64; 3])> = Vec::new();
        for _ in 0..rng.random_range(1..=12) {
            if !held.is_empty() && rng.random_bool(0.25) {
                let (id, req) = held.swap_remove(rng.random_range(0..held.len()));
                orch.release(
                    &id,
                    &Resources {
                        cpu_millicores: req[0],
                        memory_mib: req[1],
                        gpu_count: req[2],
                    },
                );
                let b = oracle.get_mut(&id).unwrap();
                (0..3).for_each(|d| b.used[d] -= req[d]);
                continue;
            }
            let n_labels = rng.random_range(0..=2);
            let labels: BTreeSet<String> = pool
                .iter()
                .choose_multiple(&mut rng, n_labels)
                .into_iter()
                .map(|l| l.to_string())
                .collect();
            let req = [
                rng.random_range(0..=6) * 500,
                rng.random_range(0..=6) * 1024,
                rng.random_range(0..=2),
            ];
            let c = ResourceConstraints {
                required_labels: labels.clone(),
                cpu_millicores: req[0],
                memory_mib: req[1],
                gpu_count: req[2],
            };
            let (eligible, expected) = oracle_route(&oracle, &labels, req);
            let actual = orch.route_and_reserve(&c);
            decisions += 1;
            ensure!(
                actual == expected,
                "instance {instance}: routed {actual:?}, oracle {expected:?} (eligible {eligible:?})"
            );
            if let Ok(id) = &actual {
                ensure!(
                    eligible.contains(id),
                    "instance {instance}: {id} not eligible"
                );
                let b = oracle.get_mut(id).unwrap();
                (0..3).for_each(|d| b.used[d] += req[d]);
                held.push((id.clone(), req));
                placed += 1;
            } else {
                refused += 1;
            }
            for d in orch.snapshot() {
                let o = &oracle[&d.id];
                let used = [
                    d.allocated.cpu_millicores,
                    d.allocated.memory_mib,
                    d.allocated.gpu_count,
                ];
                ensure!(
                    used == o.used,
                    "instance {instance}: ledger of {} is {used:?}, oracle {:?}",
                    d.id,
                    o.used
                );
                ensure!(
                    d.allocated.fits_within(&d.capacity),
                    "instance {instance}: {} over capacity",
                    d.id
                );
            }
        }
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "1000 instances, {decisions} decisions ({placed} placed, {refused} refused) all equal to the oracle; 0 capacity violations; {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---- 4 ----

fn trainer_spec() -> ServiceSpec {
    let mut s = ServiceSpec::minimal("trainer", "1.0.0");
    s.command = vec!["train".into()];
    s.constraints = ResourceConstraints::with_labels(["gpu"]);
    s.constraints.gpu_count = 1;
    s.constraints.cpu_millicores = 1000;
    s
}

async fn c4_hierarchical_delegation() -> Outcome {
    const INTERVAL_MS: u64 = 200;
    let child = Harness::start(|c| {
        c.users.push(conductor::authz::StaticUser {
            credential: "parent-engine-credential".into(),
            subject: "parent-engine".into(),
            display_name: None,
        });
        c.backends.push(BackendRegistration {
            descriptor: mock_descriptor("gpu-node", &["gpu", "cpu"], cap(32_000, 65_536, 4)),
            credential: None,
            scripts: Some(MockScripts {
                default: Some(vec![
                    Phase::Starting,
                    Phase::Starting,
                    Phase::Starting,
                    Phase::Running,
                ]),
                ..MockScripts::default()
            }),
        });
    })
    .await;
    let parent = Harness::start(|c| {
        c.backends.push(laptop());
        c.reconcile_interval_ms = INTERVAL_MS;
    })
    .await;
    child.alice.register_service(&trainer_spec()).await?;
    parent.alice.register_service(&trainer_spec()).await?;
    let mut remote = conductor_core::BackendDescriptor::new(
        "child",
        BackendKind::RemoteDelegate,
        &["gpu", "cpu"],
        cap(0, 0, 0),
    );
    remote.endpoint = Some(child.server.api_url());
    parent
        .alice
        .register_backend(&BackendRegistration {
            descriptor: remote,
            credential: Some("parent-engine-credential".into()),
            scripts: None,
        })
        .await?;

    let delegate = ApiClient::new(
        &child.server.api_url(),
        Some("parent-engine-credential".into()),
    );
    let started = parent
        .alice
        .start("trainer", &StartRequest::default())
        .await?;
    let deadline = Instant::now() + Duration::from_secs(15);
    let (mut child_running_at, mut parent_running_at) = (None, None);
    let mut max_lag = Duration::ZERO;
    let mut observations = 0;
    while parent_running_at.is_none() {
        ensure!(
            Instant::now() < deadline,
            "parent entry never reached Running"
        );
        let p = parent.alice.event(&started.event_id).await?;
        let p_entry = p.entry(&started.entry_id).unwrap().clone();
        ensure!(
            !p_entry.exhausted,
            "parent entry failed: {:?}",
            p_entry.last_error
        );
        let c_state = delegate
            .events()
            .await?
            .first()
            .and_then(|e| e.entries.first().map(|x| x.state));
        let now = Instant::now();
        if let Some(cs) = c_state {
            observations += 1;
            if cs == EntryState::Running && child_running_at.is_none() {
                child_running_at = Some(now);
            }
            // Parent lags the child by at most one sweep.
            if let (Some(ts), true) = (child_running_at, p_entry.state != EntryState::Running) {
                max_lag = max_lag.max(now - ts);
            }
        }
        if p_entry.state == EntryState::Running {
            ensure!(
                p_entry.backend_id.as_deref() == Some("child"),
                "placed on {:?}",
                p_entry.backend_id
            );
            parent_running_at = Some(now);
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let lag = parent_running_at.unwrap() - child_running_at.unwrap_or(parent_running_at.unwrap());
    // One interval, plus the sweep's own HTTP round trips and the 10 ms poll.
    let bound = Duration::from_millis(INTERVAL_MS + 60);
    ensure!(
        lag <= bound,
        "parent followed the child after {lag:?} (bound {bound:?})"
    );
    let p = parent.alice.event(&started.event_id).await?;
    let c = delegate.events().await?;
    ensure!(
        p.entries[0].state == c[0].entries[0].state && p.state == c[0].state,
        "parent {:?}/{:?} vs child {:?}/{:?}",
        p.state,
        p.entries[0].state,
        c[0].state,
        c[0].entries[0].state
    );
    parent.alice.terminate(&started.event_id).await?;
    let c = delegate.events().await?;
    ensure!(
        c[0].state == EventState::Terminated,
        "child event {:?} after parent terminate",
        c[0].state
    );
    parent.server.shutdown().await;
    child.server.shutdown().await;
    Ok(format!(
        "gpu launch placed on the remote delegate; parent Running {:.0} ms after the child (interval {INTERVAL_MS} ms, {observations} polls); states equal",
        lag.as_secs_f64() * 1000.0
    ))
}

// ---- 5 ----

async fn restart_run(budget: u32) -> anyhow::Result<(EntryState, u32, bool, usize)> {
    let dir = tempfile::tempdir()?;
    let clock = Arc::new(ManualClock::new(1_000_000));
    let scripts = MockScripts::default().service(
        "flaky",
        vec![
            vec![Phase::Crashed],
            vec![Phase::Crashed],
            vec![Phase::Running],
        ],
    );
    let (engine, mock) = mock_engine(dir.path(), clock.clone(), scripts);
    engine.register_service(plain_spec("flaky", budget))?;
    let (_, entry) = engine.create_event(&alice(), "flaky", &StartRequest::default())?;
    let mut sweeps = 0;
    loop {
        clock.advance_ms(1000);
        if engine.reconcile().await.is_empty() {
            break;
        }
        sweeps += 1;
        ensure!(
            sweeps <= budget as usize + 4,
            "no fixed point after {sweeps} sweeps"
        );
    }
    let e = engine.state().entries[&entry.id].clone();
    ensure!(
        mock.provisions_for(&entry.id) == e.restart_count + 1,
        "{} provisions for {} restarts",
        mock.provisions_for(&entry.id),
        e.restart_count
    );
    Ok((e.state, e.restart_count, e.exhausted, sweeps))
}

async fn c5_restart_semantics() -> Outcome {
    let (s3, n3, x3, sw3) = restart_run(3).await?;
    ensure!(
        s3 == EntryState::Running && n3 == 2 && !x3,
        "budget 3: {s3:?} count {n3}"
    );
    let (s1, n1, x1, sw1) = restart_run(1).await?;
    ensure!(
        s1 == EntryState::Failed && x1,
        "budget 1: {s1:?} exhausted={x1}"
    );
    Ok(format!(
        "budget 3: Running, restart_count={n3} ({sw3} sweeps); budget 1: Failed after {n1} restart ({sw1} sweeps)"
    ))
}

// ---- 6 ----

fn matches_grammar(hostname: &str, slug: &str, event_id: &str, base: &str) -> bool {
    let short = event_id[event_id.len() - 6..].to_lowercase();
    let Some(label) = hostname.strip_suffix(&format!(".{base}")) else {
        return false;
    };
    if label == format!("{slug}-{short}") {
        return true;
    }
    let Some(mid) = label
        .strip_prefix(&format!("{slug}-"))
        .and_then(|r| r.strip_suffix(&format!("-{short}")))
    else {
        return false;
    };
    mid.parse::<u64>().is_ok_and(|n| n >= 2) && !mid.starts_with('0')
}

async fn c6_url_uniqueness() -> Outcome {
    let h = Harness::start(|c| {
        c.backends.push(BackendRegistration {
            descriptor: mock_descriptor("web", &["web-ingress"], cap(1_000_000, 1 << 24, 0)),
            credential: None,
            scripts: None,
        })
    })
    .await;
    h.alice
        .register_service(&echo_spec("echo", "1.0.0"))
        .await?;
    let launches = (0..50).map(|_| {
        let c = h.alice.clone();
        tokio::spawn(async move { c.start("echo", &StartRequest::default()).await })
    });
    let mut started = Vec::new();
    for l in futures::future::join_all(launches).await {
        started.push(l??);
    }
    let mut hostnames = BTreeSet::new();
    for s in &started {
        let v = h.alice.event(&s.event_id).await?;
        let host = v.entry(&s.entry_id).unwrap().hostname.clone().unwrap();
        ensure!(
            matches_grammar(&host, "echo", &s.event_id, "sciorchestra.localhost"),
            "{host} does not match the grammar for {}",
            s.event_id
        );
        hostnames.insert(host);
    }
    ensure!(
        hostnames.len() == 50,
        "{} distinct hostnames",
        hostnames.len()
    );
    h.server.shutdown().await;
    Ok(
        "50 concurrent launches, 50 distinct hostnames, all match <slug>[-<n>]-<shortid>.<base>"
            .into(),
    )
}

// ---- 7 ----

async fn c7_event_scoped_authorization() -> Outcome {
    let h = Harness::start(|c| c.backends.push(laptop())).await;
    h.alice
        .register_service(&echo_spec("echo", "1.0.0"))
        .await?;
    h.alice
        .register_service(&echo_spec("viewer", "1.0.0"))
        .await?;
    let a = h.alice.start("echo", &StartRequest::default()).await?;
    let a2 = h
        .alice
        .start(
            "viewer",
            &StartRequest {
                event_id: Some(a.event_id.clone()),
                ..StartRequest::default()
            },
        )
        .await?;
    wait_entry(
        &h.alice,
        &a.event_id,
        &a.entry_id,
        Duration::from_secs(10),
        running,
    )
    .await;
    let view = wait_entry(
        &h.alice,
        &a.event_id,
        &a2.entry_id,
        Duration::from_secs(10),
        running,
    )
    .await;
    let urls: Vec<String> = view
        .entries
        .iter()
        .map(|e| e.url.clone().unwrap())
        .collect();
    let ev = a.event_id.clone();

    // Bob's token for his own event: valid, but scoped elsewhere.
    let own = h.bob.start("echo", &StartRequest::default()).await?;
    let bob_token = h.bob.token(&own.event_id).await?.token;

    let bob_routes = |client: ApiClient, ev: String| async move {
        let mut out = Vec::new();
        out.push((
            "GET event",
            client
                .raw(reqwest::Method::GET, &format!("/events/{ev}"), None::<&()>)
                .await
                .map(|r| r.status),
        ));
        out.push((
            "GET token",
            client
                .raw(
                    reqwest::Method::GET,
                    &format!("/events/{ev}/token"),
                    None::<&()>,
                )
                .await
                .map(|r| r.status),
        ));
        out
    };
    for (route, status) in bob_routes(h.bob.clone(), ev.clone()).await {
        ensure!(status? == 403, "before share, {route} was not 403");
    }
    let add = json!({"service": "echo"});
    let s = h
        .bob
        .raw(
            reqwest::Method::POST,
            &format!("/events/{ev}/services"),
            Some(&add),
        )
        .await?
        .status;
    ensure!(s == 403, "before share, add entry -> {s}");
    let share_carol = json!({"subject": "carol"});
    let s = h
        .bob
        .raw(
            reqwest::Method::POST,
            &format!("/events/{ev}/share"),
            Some(&share_carol),
        )
        .await?
        .status;
    ensure!(s == 403, "before share, share -> {s}");
    let s = h
        .bob
        .raw(
            reqwest::Method::DELETE,
            &format!("/events/{ev}"),
            None::<&()>,
        )
        .await?
        .status;
    ensure!(s == 403, "before share, terminate -> {s}");
    for url in &urls {
        let (s, _) = fetch(h.proxy(), url, Some(&bob_token)).await;
        ensure!(s == 403, "before share, {url} -> {s}");
    }
    ensure!(
        h.bob.events().await?.iter().all(|e| e.id != ev),
        "alice's event listed for bob before share"
    );

    // Observe bob's view continuously while alice shares.
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let observer = {
        let (bob, ev, urls, stop, proxy) = (
            h.bob.clone(),
            ev.clone(),
            urls.clone(),
            stop.clone(),
            h.proxy(),
        );
        tokio::spawn(async move {
            let mut seen: Vec<(String, u16)> = Vec::new();
            let mut after_stop = 0;
            while after_stop < 3 {
                if stop.load(std::sync::atomic::Ordering::SeqCst) {
                    after_stop += 1;
                }
                let s = bob
                    .raw(reqwest::Method::GET, &format!("/events/{ev}"), None::<&()>)
                    .await
                    .unwrap()
                    .status;
                seen.push(("event".into(), s));
                let t = bob
                    .raw(
                        reqwest::Method::GET,
                        &format!("/events/{ev}/token"),
                        None::<&()>,
                    )
                    .await
                    .unwrap();
                seen.push(("token".into(), t.status));
                if t.status == 200 {
                    let token: conductor::wire::TokenResponse =
                        serde_json::from_slice(&t.body).unwrap();
                    for url in &urls {
                        seen.push((url.clone(), fetch(proxy, url, Some(&token.token)).await.0));
                    }
                }
            }
            seen
        })
    };
    tokio::time::sleep(Duration::from_millis(30)).await;
    h.alice
        .share(
            &ev,
            &ShareRequest {
                subject: "bob".into(),
                provider: None,
            },
        )
        .await?;
    stop.store(true, std::sync::atomic::Ordering::SeqCst);
    let seen = observer.await?;
    let first_allow = seen
        .iter()
        .position(|(_, s)| *s == 200)
        .unwrap_or(seen.len());
    ensure!(
        seen[..first_allow].iter().all(|(_, s)| *s == 403)
            && seen[first_allow..].iter().all(|(_, s)| *s == 200),
        "mixed visibility: {seen:?}"
    );

    for (route, status) in bob_routes(h.bob.clone(), ev.clone()).await {
        ensure!(status? == 200, "after share, {route} was not 200");
    }
    let token = h.bob.token(&ev).await?.token;
    for url in &urls {
        let (s, _) = fetch(h.proxy(), url, Some(&token)).await;
        ensure!(s == 200, "after share, {url} -> {s}");
    }
    ensure!(
        h.bob.events().await?.iter().any(|e| e.id == ev),
        "event not listed for bob"
    );
    let s = h
        .bob
        .raw(
            reqwest::Method::POST,
            &format!("/events/{ev}/services"),
            Some(&add),
        )
        .await?
        .status;
    ensure!(s == 202, "after share, add entry -> {s}");
    let s = h
        .bob
        .raw(
            reqwest::Method::POST,
            &format!("/events/{ev}/share"),
            Some(&share_carol),
        )
        .await?
        .status;
    ensure!(s == 200, "after share, share -> {s}");
    let s = h
        .bob
        .raw(
            reqwest::Method::DELETE,
            &format!("/events/{ev}"),
            None::<&()>,
        )
        .await?
        .status;
    ensure!(s == 200, "after share, terminate -> {s}");
    h.server.shutdown().await;
    Ok(format!(
        "403 on 2 entry URLs and 5 event routes before share, 200 on all after; {} observed responses switch once",
        seen.len()
    ))
}

// ---- 8 ----

fn recovery_scripts() -> (MockScripts, BTreeMap<&'static str, u32>) {
    use Phase::*;
    let scripts = MockScripts::default()
        .service("steady", vec![vec![Starting, Running]])
        .service(
            "flaky",
            vec![vec![Starting, Crashed], vec![Crashed], vec![Running]],
        )
        .service("doomed", vec![vec![Running, Crashed]])
        .service("batch", vec![vec![Running, ExitedOk]]);
    let budgets = BTreeMap::from([("steady", 0), ("flaky", 3), ("doomed", 1), ("batch", 0)]);
    (scripts, budgets)
}

/// Final (state, restart_count, exhausted) implied by a script and budget.
fn scripted_outcome(attempts: &[Vec<Phase>], budget: u32) -> (EntryState, u32, bool) {
    let mut attempt = 0u32;
    loop {
        let script = &attempts[(attempt as usize).min(attempts.len() - 1)];
        let end = script
            .iter()
            .find(|p| matches!(p, Phase::Crashed | Phase::ExitedOk | Phase::Unknown))
            .copied()
            .unwrap_or(*script.last().unwrap());
        match end {
            Phase::Running => return (EntryState::Running, attempt, false),
            Phase::ExitedOk => return (EntryState::Stopped, attempt, false),
            _ if attempt < budget => attempt += 1,
            _ => return (EntryState::Failed, attempt, true),
        }
    }
}

/// Sweeps until three in a row issue no actions. A scripted `Starting`
/// probe issues none, so a single quiet sweep is not a fixed point.
async fn settle(engine: &Engine, clock: &ManualClock, limit: usize) -> Result<usize, String> {
    let (mut quiet, mut sweeps) = (0, 0);
    while quiet < 3 {
        ensure_sweeps(sweeps, limit)?;
        clock.advance_ms(1000);
        let actions = engine.reconcile().await;
        if engine.is_halted() {
            return Err("halted".into());
        }
        quiet = if actions.is_empty() { quiet + 1 } else { 0 };
        sweeps += 1;
    }
    Ok(sweeps)
}

fn ensure_sweeps(sweeps: usize, limit: usize) -> Result<(), String> {
    match sweeps < limit {
        true => Ok(()),
        false => Err(format!("no fixed point after {limit} sweeps")),
    }
}

const SERVICES: [&str; 4] = ["steady", "flaky", "doomed", "batch"];

/// Ten events with a fixed sequence of launches, additions, terminations
/// and sweeps. Stops at the first error, as a dead process would.
async fn workload(engine: &Engine, clock: &ManualClock) -> Result<(), String> {
    let owner = alice();
    let mut events = Vec::new();
    for i in 0..10 {
        let (ev, _) = engine
            .create_event(&owner, SERVICES[i % 4], &StartRequest::default())
            .map_err(|e| e.to_string())?;
        events.push(ev.id.clone());
        if i == 1 || i == 6 {
            engine
                .add_entry(
                    &ev.id,
                    &owner,
                    SERVICES[(i + 1) % 4],
                    &StartRequest::default(),
                )
                .await
                .map_err(|e| e.to_string())?;
        }
        clock.advance_ms(1000);
        engine.reconcile().await;
        if engine.is_halted() {
            return Err("halted".into());
        }
        if i == 4 {
            engine
                .terminate_event(&events[3], &owner)
                .await
                .map_err(|e| e.to_string())?;
        }
        if i == 9 {
            engine
                .terminate_event(&events[8], &owner)
                .await
                .map_err(|e| e.to_string())?;
        }
    }
    settle(engine, clock, 40).await.map(|_| ())
}

fn setup(
    dir: &Path,
    clock: Arc<ManualClock>,
    mock: &Arc<MockBackend>,
    fault: Option<FaultPlan>,
) -> anyhow::Result<Engine> {
    let engine = open_engine(
        dir,
        clock,
        StoreOptions {
            fault,
            ..fast_store()
        },
        vec![(
            mock_descriptor("mock", &["cpu", "web-ingress"], cap(64_000, 1 << 20, 0)),
            mock.clone() as Arc<dyn Backend>,
        )],
    );
    let (_, budgets) = recovery_scripts();
    for name in SERVICES {
        if engine.services().iter().all(|s| s.name != name) {
            engine.register_service(plain_spec(name, budgets[name]))?;
        }
    }
    Ok(engine)
}

/// Checks the recovered store against the scripts and the mock's ledger.
fn audit(dir: &Path, engine: &Engine, mock: &MockBackend) -> anyhow::Result<usize> {
    let (scripts, budgets) = recovery_scripts();
    let state = engine.state();
    let log = read_transition_log(&dir.join("store"))?;
    let mut last: HashMap<String, (EntryState, u32)> = HashMap::new();
    for (i, t) in log.iter().enumerate() {
        ensure!(t.seq == i as u64 + 1, "transition seq gap at {}", t.seq);
        let entry_id = t.entry_id.clone().unwrap();
        let service = state.entries[&entry_id].service.name.clone();
        let budget = budgets[service.as_str()];
        let (prev, restarts) = last
            .get(&entry_id)
            .copied()
            .unwrap_or((EntryState::Pending, 0));
        ensure!(
            prev == t.from,
            "entry {entry_id}: log jumps from {prev:?} to a record starting at {:?}",
            t.from
        );
        ensure!(
            conductor_core::state::is_legal_transition(t.from, t.to, restarts < budget),
            "illegal transition {:?} -> {:?} for {entry_id}",
            t.from,
            t.to
        );
        let restarts = restarts + u32::from(t.to == EntryState::Restarting);
        ensure!(
            restarts <= budget,
            "{entry_id} restarted {restarts} times, budget {budget}"
        );
        last.insert(entry_id, (t.to, restarts));
    }
    for e in state.entries.values() {
        let logged = last.get(&e.id).map_or(EntryState::Pending, |l| l.0);
        ensure!(
            logged == e.state,
            "entry {} is {:?} but the log ends at {logged:?}",
            e.id,
            e.state
        );
        let provisions = mock.provisions_for(&e.id);
        ensure!(
            provisions <= e.restart_count + 1,
            "entry {}: {provisions} provisions for {} restarts",
            e.id,
            e.restart_count
        );
        let live = mock.live_handles_for(&e.id);
        let event = &state.events[&e.event_id];
        if event.state == EventState::Terminated {
            ensure!(
                e.state == EntryState::Terminated,
                "entry {} of a terminated event is {:?}",
                e.id,
                e.state
            );
            ensure!(
                live == 0,
                "entry {} of a terminated event has {live} live handles",
                e.id
            );
            continue;
        }
        let expected = scripted_outcome(
            &scripts.services[e.service.name.as_str()],
            budgets[e.service.name.as_str()],
        );
        ensure!(
            (e.state, e.restart_count, e.exhausted) == expected,
            "entry {} ({}): {:?}/{}/{} but scripts imply {expected:?}",
            e.id,
            e.service.name,
            e.state,
            e.restart_count,
            e.exhausted
        );
        ensure!(
            provisions == e.restart_count + 1,
            "entry {}: {provisions} provisions",
            e.id
        );
        ensure!(
            live == usize::from(e.state == EntryState::Running),
            "entry {} ({:?}) has {live} live handles",
            e.id,
            e.state
        );
    }
    for ev in state.events.values() {
        let derived = derive_event_state(ev.entries.iter().map(|id| state.entries[id].condition()));
        ensure!(
            ev.state == derived,
            "event {} is {:?}, entries imply {derived:?}",
            ev.id,
            ev.state
        );
    }
    Ok(log.len())
}

async fn c8_crash_recovery() -> Outcome {
    let t0 = Instant::now();
    let (scripts, _) = recovery_scripts();

    // A crash-free run sizes the journal and serves as the reference.
    let dir = tempfile::tempdir()?;
    let clock = Arc::new(ManualClock::new(1_000_000));
    let mock = Arc::new(MockBackend::with_clock(
        "mock",
        scripts.clone(),
        clock.clone(),
    ));
    let engine = setup(dir.path(), clock.clone(), &mock, None)?;
    workload(&engine, &clock)
        .await
        .map_err(anyhow::Error::msg)?;
    audit(dir.path(), &engine, &mock)?;
    drop(engine);
    let journal_len = std::fs::metadata(dir.path().join("store").join("journal.jsonl"))?.len();

    let mut rng = StdRng::seed_from_u64(0xC8);
    let mut transitions = 0;
    let mut events_seen = 0;
    for trial in 0..100 {
        let offset = rng.random_range(1..journal_len);
        let dir = tempfile::tempdir()?;
        let clock = Arc::new(ManualClock::new(1_000_000));
        let mock = Arc::new(MockBackend::with_clock(
            "mock",
            scripts.clone(),
            clock.clone(),
        ));
        let crashed = {
            let engine = setup(
                dir.path(),
                clock.clone(),
                &mock,
                Some(FaultPlan {
                    crash_after_bytes: offset,
                }),
            )?;
            let r = workload(&engine, &clock).await;
            r.is_err() || engine.is_halted()
        };
        ensure!(crashed, "trial {trial}: no crash at offset {offset}");
        let engine = setup(dir.path(), clock.clone(), &mock, None)?;
        settle(&engine, &clock, 40)
            .await
            .map_err(|e| anyhow::anyhow!("trial {trial}: {e}"))?;
        transitions += audit(dir.path(), &engine, &mock).map_err(|e| {
            anyhow::anyhow!("trial {trial} (crash at byte {offset} of {journal_len}): {e:#}")
        })?;
        events_seen += engine.state().events.len();
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "100 crashes in a {journal_len}-byte journal; {transitions} replayed transitions all legal, no duplicate provisions, {events_seen} recovered events consistent with scripts; {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---- 9 ----

/// Local-process backend that keeps every payload it receives.
struct Recording {
    inner: LocalProcessBackend,
    payloads: Mutex<Vec<LaunchPayload>>,
}

#[async_trait]
impl Backend for Recording {
    fn id(&self) -> &str {
        self.inner.id()
    }
    async fn provision(&self, payload: &LaunchPayload) -> Result<ProvisionHandle, BackendError> {
        self.payloads.lock().unwrap().push(payload.clone());
        self.inner.provision(payload).await
    }
    async fn probe(&self, handle: &ProvisionHandle) -> Result<Observation, BackendError> {
        self.inner.probe(handle).await
    }
    async fn teardown(&self, handle: &ProvisionHandle) {
        self.inner.teardown(handle).await
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn count(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

async fn c9_credential_hygiene() -> Outcome {
    let log_start = captured_logs().len();
    let dir = tempfile::tempdir()?;
    let data_dir = dir.path().join("data");
    let recording = Arc::new(Recording {
        inner: LocalProcessBackend::new("laptop", data_dir.join("runs"), conductor_exe()),
        payloads: Mutex::new(Vec::new()),
    });
    let mut cfg = base_config(dir.path());
    cfg.data_dir = data_dir.clone();
    let server = conductor::server::Server::start_with(
        cfg,
        Arc::new(conductor::clock::SystemClock),
        vec![(laptop().descriptor, recording.clone() as Arc<dyn Backend>)],
    )
    .await?;
    let url = server.api_url();
    let alice_c = ApiClient::new(&url, Some(ALICE.into()));
    let bob_c = ApiClient::new(&url, Some(BOB.into()));

    let mut logging = echo_spec("logging", "1.0.0");
    logging
        .env_template
        .insert("GREETING".into(), "logs".into());
    alice_c.register_service(&logging).await?;
    alice_c.register_service(&notebook_spec()).await?;
    let a = alice_c.start("logging", &StartRequest::default()).await?;
    let v = wait_entry(
        &alice_c,
        &a.event_id,
        &a.entry_id,
        Duration::from_secs(10),
        running,
    )
    .await;
    let a_url = v.entry(&a.entry_id).unwrap().url.clone().unwrap();
    let secret = "sk-live-9d1e77ab52c4";
    let b = alice_c
        .start(
            "notebook",
            &StartRequest {
                event_id: Some(a.event_id.clone()),
                inputs: Some(BTreeMap::from([
                    ("logging_url".into(), Literal::Text(a_url.clone())),
                    ("api_key".into(), Literal::Text(secret.into())),
                ])),
                ..StartRequest::default()
            },
        )
        .await?;
    let v = wait_entry(
        &alice_c,
        &a.event_id,
        &b.entry_id,
        Duration::from_secs(10),
        running,
    )
    .await;
    let b_url = v.entry(&b.entry_id).unwrap().url.clone().unwrap();
    ensure!(
        v.entry(&b.entry_id).unwrap().inputs.get("api_key")
            == Some(&Literal::Text(conductor::wire::REDACTED.into())),
        "status shows the secret input"
    );
    alice_c
        .share(
            &a.event_id,
            &ShareRequest {
                subject: "bob".into(),
                provider: None,
            },
        )
        .await?;
    let mut session_tokens = vec![alice_c.token(&a.event_id).await?.token];
    session_tokens.push(bob_c.token(&a.event_id).await?.token);
    for (u, t) in [(&a_url, &session_tokens[0]), (&b_url, &session_tokens[1])] {
        let (s, body) = fetch(server.proxy_addr, u, Some(t)).await;
        ensure!(s == 200, "{u} -> {s}");
        ensure!(
            !body.contains(t.as_str()),
            "the proxy forwarded the session token"
        );
    }
    let (s, _) = fetch(
        server.proxy_addr,
        &format!("{a_url}/?token={}", session_tokens[0]),
        None,
    )
    .await;
    ensure!(s == 200, "query token -> {s}");
    let event = server.engine.state().events[&a.event_id].clone();
    let injection = server.engine.injection_token(&event);
    alice_c.terminate(&a.event_id).await?;
    server.shutdown().await;

    let credentials = [ALICE, BOB, CAROL];
    let mut scanned = 0;
    let mut artifacts: Vec<(String, String)> = files_under(&data_dir)
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != "signing.key"))
        .map(|p| {
            (
                p.display().to_string(),
                std::fs::read_to_string(&p).unwrap_or_default(),
            )
        })
        .collect();
    let logs = captured_logs()[log_start..].to_string();
    ensure!(
        logs.lines().count() > 5,
        "only {} log lines captured",
        logs.lines().count()
    );
    artifacts.push(("engine log".into(), logs));
    let payloads = recording.payloads.lock().unwrap().clone();
    ensure!(payloads.len() == 2, "{} payloads", payloads.len());
    for p in &payloads {
        artifacts.push((format!("payload {}", p.entry_id), serde_json::to_string(p)?));
    }
    for (name, text) in &artifacts {
        scanned += text.len();
        for c in credentials {
            ensure!(!text.contains(c), "user credential found in {name}");
        }
        for t in &session_tokens {
            ensure!(!text.contains(t.as_str()), "session token found in {name}");
        }
        let is_meta = name.ends_with("meta.json");
        let is_payload = name.starts_with("payload ");
        if !is_meta && !is_payload {
            ensure!(!text.contains(&injection), "event token found in {name}");
            ensure!(!text.contains(secret), "secret input value found in {name}");
        }
    }
    // Tokens sit exactly where templates ask for them.
    for p in &payloads {
        let templated: Vec<_> = p
            .resolved_env
            .iter()
            .filter(|(_, v)| v.contains(&injection))
            .map(|(k, _)| k.as_str())
            .collect();
        let expected: Vec<&str> = if p.service.name == "notebook" {
            vec!["LOGGING_TOKEN"]
        } else {
            vec![]
        };
        ensure!(
            templated == expected,
            "{} env carries the token under {templated:?}",
            p.service.name
        );
        let json = serde_json::to_string(p)?;
        ensure!(
            count(&json, &injection) == 1 + expected.len(),
            "{} payload mentions the token {} times",
            p.service.name,
            count(&json, &injection)
        );
    }
    for (name, text) in artifacts.iter().filter(|(n, _)| n.ends_with("meta.json")) {
        let meta: RunMeta = serde_json::from_str(text)?;
        let expected = usize::from(meta.service.starts_with("notebook@"));
        ensure!(
            count(text, &injection) == expected,
            "{name} ({}) mentions the token {} times",
            meta.service,
            count(text, &injection)
        );
        ensure!(!text.contains(secret), "{name} carries the secret value");
    }
    Ok(format!(
        "{} artifacts ({} KiB: store, run dirs, logs, payloads) hold 0 credentials; event token only in the templated LOGGING_TOKEN",
        artifacts.len(),
        scanned / 1024
    ))
}

// ---- 10 ----

fn oracle_schema(fields: &[FieldSpec]) -> Value {
    let mut props = serde_json::Map::new();
    for f in fields {
        let mut p = json!({});
        let (ty, fmt) = match f.kind {
            FieldKind::String => ("string", None),
            FieldKind::Integer => ("integer", None),
            FieldKind::Number => ("number", None),
            FieldKind::Boolean => ("boolean", None),
            FieldKind::Url => ("string", Some("uri")),
            FieldKind::Secret => ("string", Some("password")),
        };
        p["type"] = ty.into();
        if let Some(fmt) = fmt {
            p["format"] = fmt.into();
        }
        if f.kind == FieldKind::Secret {
            p["writeOnly"] = true.into();
        }
        if !f.description.is_empty() {
            p["description"] = f.description.clone().into();
        }
        if let Some(d) = &f.default {
            p["default"] = serde_json::to_value(d).unwrap();
        }
        props.insert(f.name.clone(), p);
    }
    let required: Vec<&str> = fields
        .iter()
        .filter(|f| f.required)
        .map(|f| f.name.as_str())
        .collect();
    json!({"type": "object", "properties": props, "required": required, "additionalProperties": false})
}

fn random_spec(rng: &mut StdRng, name: &str, version: (u32, u32, u32)) -> ServiceSpec {
    let mut s = ServiceSpec::minimal(name, &format!("{}.{}.{}", version.0, version.1, version.2));
    s.description = format!("{name} build {}", rng.random_range(0..1000));
    let kinds = [
        FieldKind::String,
        FieldKind::Integer,
        FieldKind::Number,
        FieldKind::Boolean,
        FieldKind::Url,
        FieldKind::Secret,
    ];
    for i in 0..rng.random_range(0..4) {
        let mut f = FieldSpec::new(&format!("in_{i}"), *kinds.choose(rng).unwrap());
        f.required = rng.random_bool(0.5);
        if rng.random_bool(0.3) {
            f.description = format!("input {i}");
        }
        s.schema.inputs.push(f);
    }
    if rng.random_bool(0.5) {
        s.schema
            .outputs
            .push(FieldSpec::new("result", FieldKind::Url));
    }
    s
}

fn manifest_sequence(rng: &mut StdRng, engine: &Engine) -> anyhow::Result<usize> {
    // Oracle catalog keyed by (name, numeric version); the flag marks deprecation.
    type Catalog = BTreeMap<(String, (u32, u32, u32)), (ServiceSpec, bool)>;
    let mut catalog = Catalog::new();
    let names = ["alpha", "beta", "gamma", "delta"];
    for _ in 0..rng.random_range(5..25) {
        if !catalog.is_empty() && rng.random_bool(0.3) {
            let key = catalog.keys().choose(rng).unwrap().clone();
            let v = &catalog[&key].0.version;
            engine.deprecate_service(&key.0, v)?;
            catalog.get_mut(&key).unwrap().1 = false;
        } else {
            let name = *names.choose(rng).unwrap();
            let version = (
                rng.random_range(0..3),
                rng.random_range(0..12),
                rng.random_range(0..3),
            );
            let spec = random_spec(rng, name, version);
            let key = (name.to_string(), version);
            let result = engine.register_service(spec.clone());
            match catalog.contains_key(&key) {
                true => ensure!(result.is_err(), "duplicate {name} {version:?} accepted"),
                false => {
                    result?;
                    catalog.insert(key, (spec, true));
                }
            }
        }
    }
    let expected: Vec<ToolDescriptor> = catalog
        .values()
        .filter(|(_, active)| *active)
        .map(|(s, _)| ToolDescriptor {
            name: s.name.clone(),
            version: s.version.clone(),
            description: s.description.clone(),
            input_schema: oracle_schema(&s.schema.inputs),
            output_schema: oracle_schema(&s.schema.outputs),
            invoke_hint: format!("POST /start/{}", s.name),
        })
        .collect();
    let actual = engine.manifest();
    ensure!(
        actual == expected,
        "manifest differs from the registry oracle:\n{actual:#?}\nvs\n{expected:#?}"
    );
    let pairs: BTreeSet<_> = actual.iter().map(|d| (&d.name, &d.version)).collect();
    ensure!(pairs.len() == actual.len(), "a version appears twice");
    Ok(actual.len())
}

async fn c10_manifest_fidelity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xC10);
    let mut total = 0;
    for _ in 0..200 {
        let dir = tempfile::tempdir()?;
        let (engine, _) = mock_engine(
            dir.path(),
            Arc::new(ManualClock::new(1)),
            MockScripts::default(),
        );
        total += manifest_sequence(&mut rng, &engine)?;
    }
    // The HTTP route serves the same list, unauthenticated.
    let h = Harness::start(|_| {}).await;
    let services = ["alpha", "beta", "gamma"];
    for (i, name) in services.iter().enumerate() {
        for minor in [1, 10, 9] {
            h.alice
                .register_service(&random_spec(&mut rng, name, (1, minor, i as u32)))
                .await?;
        }
    }
    h.alice.deprecate("beta", "1.10.1").await?;
    let served = h.anon.manifest().await?;
    ensure!(
        served == h.server.engine.manifest(),
        "GET /manifest differs from the registry"
    );
    let order: Vec<String> = served
        .iter()
        .map(|d| format!("{}@{}", d.name, d.version))
        .collect();
    ensure!(
        order
            == [
                "alpha@1.1.0",
                "alpha@1.9.0",
                "alpha@1.10.0",
                "beta@1.1.1",
                "beta@1.9.1",
                "gamma@1.1.2",
                "gamma@1.9.2",
                "gamma@1.10.2"
            ],
        "order {order:?}"
    );
    h.server.shutdown().await;
    Ok(format!("200 randomized register/deprecate sequences ({total} descriptors) equal the oracle; GET /manifest agrees"))
}

// ---- runner ----

fn log_buffer() -> &'static Arc<Mutex<Vec<u8>>> {
    static BUF: OnceLock<Arc<Mutex<Vec<u8>>>> = OnceLock::new();
    BUF.get_or_init(Default::default)
}

fn captured_logs() -> String {
    String::from_utf8_lossy(&log_buffer().lock().unwrap()).into_owned()
}

struct LogWriter;

impl Write for LogWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        log_buffer().lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

const CRITERIA: &[(u32, &str, Criterion)] = &[
    (1, "end-to-end launch", || Box::pin(c1_end_to_end_launch())),
    (2, "composition", || Box::pin(c2_composition())),
    (3, "routing oracle", || Box::pin(c3_routing_oracle())),
    (4, "hierarchical delegation", || {
        Box::pin(c4_hierarchical_delegation())
    }),
    (5, "restart semantics", || Box::pin(c5_restart_semantics())),
    (6, "URL uniqueness", || Box::pin(c6_url_uniqueness())),
    (7, "event-scoped authorization", || {
        Box::pin(c7_event_scoped_authorization())
    }),
    (8, "crash recovery", || Box::pin(c8_crash_recovery())),
    (
        9,
        "credential hygiene",
        || Box::pin(c9_credential_hygiene()),
    ),
    (
        10,
        "manifest fidelity",
        || Box::pin(c10_manifest_fidelity()),
    ),
];

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter("conductor=debug")
        .with_writer(|| LogWriter)
        .with_ansi(false)
        .init();
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if filter.is_some_and(|f| f != *n) {
            continue;
        }
        let t0 = Instant::now();
        let result = rt.block_on(async { tokio::spawn(run()).await });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(Ok(detail)) => println!("criterion {n:>2} PASS  {name} ({secs:.2}s): {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.2}s): {e:#}");
            }
            Err(panic) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.2}s): panicked: {panic}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
