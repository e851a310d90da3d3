//! Event-specific hostnames and the token-gated reverse proxy.
//!
//! The proxy routes on the `Host` header. A request is forwarded only when
//! the hostname is bound, a token is present and verifies, and the token's
//! event is the binding's event. The token travels in `Authorization:
//! Bearer` or a `token` query parameter (the header wins) and is stripped
//! before the request reaches the workload.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, HeaderName, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use conductor_core::allocate_hostname;

use crate::authz::Authz;
use crate::clock::Clock;
use crate::records::{Endpoint, RouteBinding};
use crate::wire::ErrorBody;

const MAX_BODY: usize = 64 << 20;

/// Live hostname bindings. Allocation and insertion happen under one write
/// lock, so two callers can never receive the same name.
#[derive(Debug, Default)]
pub struct BindingTable {
    inner: RwLock<HashMap<String, RouteBinding>>,
}

impl BindingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&self, bindings: impl IntoIterator<Item = RouteBinding>) {
        let mut map = self.inner.write().unwrap();
        map.clear();
        map.extend(bindings.into_iter().map(|b| (b.hostname.clone(), b)));
    }

    /// Allocates a free hostname and reserves it with no target yet.
    pub fn reserve(
        &self,
        slug: &str,
        event_id: &str,
        entry_id: &str,
        base_domain: &str,
        now_ms: u64,
    ) -> RouteBinding {
        let mut map = self.inner.write().unwrap();
        let hostname = allocate_hostname(slug, event_id, base_domain, |h| map.contains_key(h));
        let binding = RouteBinding {
            hostname: hostname.clone(),
            target: None,
            event_id: event_id.into(),
            entry_id: entry_id.into(),
            created_at: now_ms,
        };
        map.insert(hostname, binding.clone());
        binding
    }

    pub fn get(&self, hostname: &str) -> Option<RouteBinding> {
        self.inner.read().unwrap().get(hostname).cloned()
    }

    /// Points an existing binding at `target`; returns the updated binding.
    pub fn set_target(&self, hostname: &str, target: Option<Endpoint>) -> Option<RouteBinding> {
        let mut map = self.inner.write().unwrap();
        let b = map.get_mut(hostname)?;
        b.target = target;
        Some(b.clone())
    }

    pub fn remove(&self, hostname: &str) -> Option<RouteBinding> {
        self.inner.write().unwrap().remove(hostname)
    }

    /// Removes every binding of `event_id`, returning how many there were.
    pub fn release_event(&self, event_id: &str) -> usize {
        let mut map = self.inner.write().unwrap();
        let before = map.len();
        map.retain(|_, b| b.event_id != event_id);
        before - map.len()
    }

    pub fn for_event(&self, event_id: &str) -> Vec<RouteBinding> {
        let map = self.inner.read().unwrap();
        let mut out: Vec<_> = map
            .values()
            .filter(|b| b.event_id == event_id)
            .cloned()
            .collect();
        out.sort_by(|a, b| a.hostname.cmp(&b.hostname));
        out
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone)]
pub struct ProxyState {
    pub table: Arc<BindingTable>,
    pub authz: Arc<Authz>,
    pub clock: Arc<dyn Clock>,
    http: reqwest::Client,
}

impl ProxyState {
    pub fn new(table: Arc<BindingTable>, authz: Arc<Authz>, clock: Arc<dyn Clock>) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(60))
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .expect("http client");
        Self {
            table,
            authz,
            clock,
            http,
        }
    }
}

pub fn proxy_router(state: ProxyState) -> Router {
    Router::new().fallback(proxy).with_state(state)
}

fn deny(status: StatusCode, code: &str, message: &str) -> Response {
    let body = ErrorBody {
        code: code.into(),
        message: message.into(),
        request_id: crate::api::request_id(),
    };
    (status, axum::Json(body)).into_response()
}

fn request_host(req: &Request) -> Option<String> {
    let raw = req
        .headers()
        .get(header::HOST)
        .and_then(|h| h.to_str().ok())
        .map(String::from)
        .or_else(|| req.uri().authority().map(|a| a.to_string()))?;
    let host = match raw.rsplit_once(':') {
        Some((h, port)) if port.bytes().all(|b| b.is_ascii_digit()) => h,
        _ => raw.as_str(),
    };
    Some(host.to_ascii_lowercase())
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let token = value
        .strip_prefix("Bearer ")
        .or_else(|| value.strip_prefix("bearer "))?;
    Some(token.trim().to_string())
}

/// Splits the `token` parameter out of a query string, keeping the other
/// pairs byte-for-byte.
fn split_query_token(query: Option<&str>) -> (Option<String>, Option<String>) {
    let Some(q) = query else {
        return (None, None);
    };
    let mut token = None;
    let mut kept = Vec::new();
    for pair in q.split('&') {
        match pair.strip_prefix("token=") {
            Some(t) if token.is_none() => token = Some(t.to_string()),
            Some(_) => {}
            None => kept.push(pair),
        }
    }
    let rest = (!kept.is_empty()).then(|| kept.join("&"));
    (token, rest)
}

fn hop_by_hop(name: &HeaderName) -> bool {
    matches!(
        name.as_str(),
        "connection"
            | "keep-alive"
            | "proxy-authenticate"
            | "proxy-authorization"
            | "te"
            | "trailer"
            | "transfer-encoding"
            | "upgrade"
            | "host"
            | "content-length"
    )
}

async fn proxy(State(st): State<ProxyState>, req: Request) -> Response {
    let Some(host) = request_host(&req) else {
        return deny(StatusCode::NOT_FOUND, "unknown_host", "no Host header");
    };
    let Some(binding) = st.table.get(&host) else {
        return deny(StatusCode::NOT_FOUND, "unknown_host", "no such hostname");
    };

    let header_token = bearer(req.headers());
    let (query_token, rest_query) = split_query_token(req.uri().query());
    let from_header = header_token.is_some();
    let Some(token) = header_token.or(query_token) else {
        return deny(
            StatusCode::UNAUTHORIZED,
            "unauthenticated",
            "token required",
        );
    };
    let claims = match st.authz.verify(&token, st.clock.now_ms()) {
        Ok(c) => c,
        Err(e) => return deny(StatusCode::UNAUTHORIZED, "unauthenticated", &e.to_string()),
    };
    if claims.scope_event != binding.event_id {
        return deny(
            StatusCode::FORBIDDEN,
            "forbidden",
            "token is scoped to another event",
        );
    }
    let Some(target) = binding.target else {
        return deny(
            StatusCode::BAD_GATEWAY,
            "bad_gateway",
            "entry has no endpoint yet",
        );
    };

    let (parts, body) = req.into_parts();
    let body = match to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(e) => return deny(StatusCode::BAD_REQUEST, "bad_request", &e.to_string()),
    };
    let mut url = format!("http://{target}{}", parts.uri.path());
    if let Some(q) = rest_query {
        url.push('?');
        url.push_str(&q);
    }
    let mut headers = HeaderMap::new();
    for (name, value) in &parts.headers {
        if hop_by_hop(name) || (from_header && name == header::AUTHORIZATION) {
            continue;
        }
        headers.append(name.clone(), value.clone());
    }
    let upstream = st
        .http
        .request(parts.method, url)
        .headers(headers)
        .body(body)
        .send()
        .await;
    let upstream = match upstream {
        Ok(r) => r,
        Err(e) => return deny(StatusCode::BAD_GATEWAY, "bad_gateway", &e.to_string()),
    };
    let status = upstream.status();
    let mut out_headers = HeaderMap::new();
    for (name, value) in upstream.headers() {
        if !hop_by_hop(name) {
            out_headers.append(name.clone(), value.clone());
        }
    }
    match upstream.bytes().await {
        Ok(bytes) => {
            let mut resp = Response::new(Body::from(bytes));
            *resp.status_mut() = status;
            *resp.headers_mut() = out_headers;
            resp
        }
        Err(e) => deny(StatusCode::BAD_GATEWAY, "bad_gateway", &e.to_string()),
    }
}
