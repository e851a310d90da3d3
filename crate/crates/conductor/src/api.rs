//! REST surface over the engine. Handlers authenticate, call one engine
//! operation and render its result; they hold no state of their own.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Path, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conductor_core::placement::DescriptorError;
use conductor_core::{Identity, ServiceSpec};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::authz::AuthError;
use crate::lifecycle::{Engine, EngineError};
use crate::registry::RegistryError;
use crate::wire::{
    AddEntryRequest, BackendRegistration, ErrorBody, ShareRequest, StartRequest, StartResponse,
};

/// Random per-response id, echoed in error bodies and the `x-request-id` header.
pub fn request_id() -> String {
    format!("req-{:016x}", rand::rng().random::<u64>())
}

#[derive(Clone)]
pub struct ApiState {
    pub engine: Arc<Engine>,
    /// Subjects allowed to read the raw store dump.
    pub admins: Arc<BTreeSet<String>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.into(),
            message: self.message,
            request_id: request_id(),
        };
        let mut res = (self.status, Json(&body)).into_response();
        if let Ok(v) = body.request_id.parse() {
            res.headers_mut().insert("x-request-id", v);
        }
        res
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            EngineError::Unauthorized(_) => (S::FORBIDDEN, "forbidden"),
            EngineError::UnknownEvent(_) => (S::NOT_FOUND, "unknown_event"),
            EngineError::Registry(r) => match r {
                RegistryError::UnknownService(_) => (S::NOT_FOUND, "unknown_service"),
                RegistryError::UnknownVersion { .. } => (S::NOT_FOUND, "unknown_version"),
                RegistryError::NoActiveVersion(_) => (S::NOT_FOUND, "no_active_version"),
                RegistryError::DuplicateVersion { .. } => (S::CONFLICT, "duplicate_version"),
                RegistryError::InvalidSpec(_) => (S::UNPROCESSABLE_ENTITY, "invalid_spec"),
            },
            EngineError::QuotaExceeded(_) => (S::CONFLICT, "quota_exceeded"),
            EngineError::InvalidInputs(_) => (S::UNPROCESSABLE_ENTITY, "invalid_inputs"),
            EngineError::EventTerminal(_) => (S::CONFLICT, "event_terminal"),
            EngineError::Descriptor(DescriptorError::Duplicate(_)) => {
                (S::CONFLICT, "duplicate_backend")
            }
            EngineError::Descriptor(_) => (S::UNPROCESSABLE_ENTITY, "invalid_backend"),
            EngineError::BadRequest(_) => (S::BAD_REQUEST, "bad_request"),
            EngineError::Store(_) => (S::SERVICE_UNAVAILABLE, "store_unavailable"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// The authenticated caller of a request.
pub struct Caller(pub Identity);

impl FromRequestParts<ApiState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &ApiState,
    ) -> Result<Self, Self::Rejection> {
        let credential = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::UNAUTHORIZED,
                    "unauthenticated",
                    "missing bearer credential",
                )
            })?;
        match state.engine.authz().authenticate(credential) {
            Ok(id) => Ok(Caller(id)),
            Err(AuthError::InvalidCredential) => Err(ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthenticated",
                "invalid credential",
            )),
            Err(e @ AuthError::ProviderUnavailable(_)) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "provider_unavailable",
                e.to_string(),
            )),
        }
    }
}

/// Parses a JSON body, reporting failures in the API's error shape.
fn parse<T: DeserializeOwned>(body: &Bytes, code: &'static str) -> ApiResult<T> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    serde_json::from_slice(body).map_err(|e| {
        let status = if code == "bad_request" {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        ApiError::new(status, code, format!("malformed body: {e}"))
    })
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/me", get(me))
        .route("/start/{service}", post(start))
        .route("/events", get(list_events))
        .route("/events/{id}", get(event).delete(terminate))
        .route("/events/{id}/services", post(add_entry))
        .route("/events/{id}/share", post(share))
        .route("/events/{id}/token", get(token))
        .route("/manifest", get(manifest))
        .route("/services", get(services).post(register_service))
        .route("/services/{name}/{version}/deprecate", post(deprecate))
        .route("/backends", get(backends).post(register_backend))
        .route("/admin/dump", get(dump))
        .fallback(not_found)
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn me(Caller(id): Caller) -> Json<Identity> {
    Json(id)
}

async fn start(
    State(s): State<ApiState>,
    Caller(caller): Caller,
    Path(service): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: StartRequest = parse(&body, "bad_request")?;
    let res = match req.event_id.clone() {
        None => {
            let (event, entry) = s.engine.create_event(&caller, &service, &req)?;
            StartResponse {
                event_id: event.id,
                entry_id: entry.id,
            }
        }
        Some(event_id) => {
            let entry = s
                .engine
                .add_entry(&event_id, &caller, &service, &req)
                .await?;
            StartResponse {
                event_id,
                entry_id: entry.id,
            }
        }
    };
    Ok((StatusCode::ACCEPTED, Json(res)))
}

async fn add_entry(
    State(s): State<ApiState>,
    Caller(caller): Caller,
    Path(event_id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: AddEntryRequest = parse(&body, "bad_request")?;
    let entry = s
        .engine
        .add_entry(&event_id, &caller, &req.service, &req.start)
        .await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(StartResponse {
            event_id,
            entry_id: entry.id,
        }),
    ))
}

async fn list_events(State(s): State<ApiState>, Caller(caller): Caller) -> impl IntoResponse {
    Json(s.engine.list_events(&caller))
}

async fn event(
    State(s): State<ApiState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.event_view(&id, &caller)?))
}

async fn terminate(
    State(s): State<ApiState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.terminate_event(&id, &caller).await?))
}

async fn share(
    State(s): State<ApiState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: ShareRequest = parse(&body, "bad_request")?;
    let provider = req.provider.as_deref().unwrap_or(&caller.provider);
    let target = s.engine.authz().identity_for(&req.subject, Some(provider));
    Ok(Json(s.engine.share_event(&id, target, &caller).await?))
}

async fn token(
    State(s): State<ApiState>,
    Caller(caller): Caller,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.session_token(&id, &caller)?))
}

async fn manifest(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.engine.manifest())
}

async fn services(State(s): State<ApiState>, Caller(_): Caller) -> impl IntoResponse {
    Json(s.engine.services())
}

async fn register_service(
    State(s): State<ApiState>,
    Caller(_): Caller,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let spec: ServiceSpec = parse(&body, "invalid_spec")?;
    Ok((StatusCode::CREATED, Json(s.engine.register_service(spec)?)))
}

async fn deprecate(
    State(s): State<ApiState>,
    Caller(_): Caller,
    Path((name, version)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.engine.deprecate_service(&name, &version)?))
}

async fn backends(State(s): State<ApiState>, Caller(_): Caller) -> impl IntoResponse {
    Json(s.engine.backends())
}

async fn register_backend(
    State(s): State<ApiState>,
    Caller(_): Caller,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let reg: BackendRegistration = parse(&body, "invalid_backend")?;
    Ok((StatusCode::CREATED, Json(s.engine.register_backend(reg)?)))
}

async fn dump(State(s): State<ApiState>, Caller(caller): Caller) -> ApiResult<impl IntoResponse> {
    if !s.admins.contains(&caller.subject) {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            "admin only",
        ));
    }
    Ok(Json(s.engine.state()))
}

#[derive(Serialize)]
struct Op {
    method: &'static str,
    path: &'static str,
    summary: &'static str,
    auth: bool,
    body: Option<&'static str>,
    ok: (u16, &'static str),
    errors: &'static [u16],
}

const OPS: &[Op] = &[
    Op {
        method: "get",
        path: "/healthz",
        summary: "Liveness probe",
        auth: false,
        body: None,
        ok: (200, "Health"),
        errors: &[],
    },
    Op {
        method: "get",
        path: "/me",
        summary: "Identity of the caller",
        auth: true,
        body: None,
        ok: (200, "Identity"),
        errors: &[401],
    },
    Op {
        method: "post",
        path: "/start/{service}",
        summary: "Launch a service in a new event, or in event_id when given",
        auth: true,
        body: Some("StartRequest"),
        ok: (202, "StartResponse"),
        errors: &[400, 401, 403, 404, 409, 422],
    },
    Op {
        method: "get",
        path: "/events",
        summary: "Events the caller is a member of",
        auth: true,
        body: None,
        ok: (200, "EventViewList"),
        errors: &[401],
    },
    Op {
        method: "get",
        path: "/events/{id}",
        summary: "Event status",
        auth: true,
        body: None,
        ok: (200, "EventView"),
        errors: &[401, 403, 404],
    },
    Op {
        method: "delete",
        path: "/events/{id}",
        summary: "Terminate an event",
        auth: true,
        body: None,
        ok: (200, "EventView"),
        errors: &[401, 403, 404],
    },
    Op {
        method: "post",
        path: "/events/{id}/services",
        summary: "Add a service to an event",
        auth: true,
        body: Some("AddEntryRequest"),
        ok: (202, "StartResponse"),
        errors: &[400, 401, 403, 404, 409, 422],
    },
    Op {
        method: "post",
        path: "/events/{id}/share",
        summary: "Add a member to an event",
        auth: true,
        body: Some("ShareRequest"),
        ok: (200, "EventView"),
        errors: &[400, 401, 403, 404],
    },
    Op {
        method: "get",
        path: "/events/{id}/token",
        summary: "Session token for the event's URLs",
        auth: true,
        body: None,
        ok: (200, "TokenResponse"),
        errors: &[401, 403, 404, 409],
    },
    Op {
        method: "get",
        path: "/manifest",
        summary: "Tool descriptors of all active services",
        auth: false,
        body: None,
        ok: (200, "ToolDescriptorList"),
        errors: &[],
    },
    Op {
        method: "get",
        path: "/services",
        summary: "All registered service versions",
        auth: true,
        body: None,
        ok: (200, "ServiceViewList"),
        errors: &[401],
    },
    Op {
        method: "post",
        path: "/services",
        summary: "Register a service version",
        auth: true,
        body: Some("ServiceSpec"),
        ok: (201, "ServiceView"),
        errors: &[401, 409, 422],
    },
    Op {
        method: "post",
        path: "/services/{name}/{version}/deprecate",
        summary: "Hide a version from latest resolution",
        auth: true,
        body: None,
        ok: (200, "ServiceView"),
        errors: &[401, 404],
    },
    Op {
        method: "get",
        path: "/backends",
        summary: "Backend descriptors with allocations",
        auth: true,
        body: None,
        ok: (200, "BackendDescriptorList"),
        errors: &[401],
    },
    Op {
        method: "post",
        path: "/backends",
        summary: "Register a backend",
        auth: true,
        body: Some("BackendRegistration"),
        ok: (201, "BackendDescriptor"),
        errors: &[401, 409, 422],
    },
    Op {
        method: "get",
        path: "/admin/dump",
        summary: "Committed store state",
        auth: true,
        body: None,
        ok: (200, "StoreState"),
        errors: &[401, 403],
    },
];

fn schema_ref(name: &str) -> Value {
    match name.strip_suffix("List") {
        Some(item) => {
            json!({"type": "array", "items": {"$ref": format!("#/components/schemas/{item}")}})
        }
        None => json!({"$ref": format!("#/components/schemas/{name}")}),
    }
}

fn object(props: &[(&str, Value)], required: &[&str]) -> Value {
    let props: serde_json::Map<_, _> = props
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    json!({"type": "object", "properties": props, "required": required})
}

fn schemas() -> Value {
    let s = || json!({"type": "string"});
    let n = || json!({"type": "integer", "minimum": 0});
    let opt_s = || json!({"type": ["string", "null"]});
    let any_obj = || json!({"type": "object"});
    let states = json!({"type": "string", "enum": ["Pending", "Routing", "Provisioning", "Starting", "Running", "Restarting", "Stopped", "Failed", "Terminated"]});
    let event_states = json!({"type": "string", "enum": ["Requested", "Active", "Degraded", "Completed", "Failed", "Terminated"]});
    json!({
        "Health": object(&[("status", s())], &["status"]),
        "Identity": object(&[("subject", s()), ("provider", s()), ("display_name", s())], &["subject", "provider"]),
        "ErrorBody": object(&[("code", s()), ("message", s()), ("request_id", s())], &["code", "message", "request_id"]),
        "StartRequest": object(&[
            ("version", s()),
            ("inputs", json!({"type": "object", "additionalProperties": {"type": ["string", "number", "integer", "boolean"]}})),
            ("event_id", s()),
            ("env", json!({"type": "object", "additionalProperties": {"type": "string"}})),
            ("secret_env", json!({"type": "array", "items": {"type": "string"}})),
            ("client_ref", s()),
        ], &[]),
        "AddEntryRequest": {"allOf": [object(&[("service", s())], &["service"]), {"$ref": "#/components/schemas/StartRequest"}]},
        "StartResponse": object(&[("event_id", s()), ("entry_id", s())], &["event_id", "entry_id"]),
        "ShareRequest": object(&[("subject", s()), ("provider", s())], &["subject"]),
        "TokenResponse": object(&[("event_id", s()), ("token", s()), ("expires_at", n())], &["event_id", "token", "expires_at"]),
        "EntryView": object(&[
            ("id", s()), ("service", s()), ("version", s()), ("state", states),
            ("exhausted", json!({"type": "boolean"})), ("url", opt_s()), ("hostname", opt_s()),
            ("endpoint", json!({"type": ["object", "null"]})), ("backend_id", opt_s()),
            ("restart_count", n()), ("last_error", opt_s()), ("inputs", any_obj()),
            ("depends_on", json!({"type": "array", "items": {"type": "string"}})),
        ], &["id", "service", "version", "state", "restart_count"]),
        "EventView": object(&[
            ("id", s()), ("state", event_states), ("owner", s()),
            ("members", json!({"type": "array", "items": {"type": "string"}})),
            ("created_at", n()),
            ("entries", json!({"type": "array", "items": {"$ref": "#/components/schemas/EntryView"}})),
            ("bridges", json!({"type": "array", "items": {"type": "object"}})),
        ], &["id", "state", "owner", "members", "created_at", "entries"]),
        "ToolDescriptor": object(&[
            ("name", s()), ("version", s()), ("description", s()),
            ("input_schema", any_obj()), ("output_schema", any_obj()), ("invoke_hint", s()),
        ], &["name", "version", "description", "input_schema", "output_schema", "invoke_hint"]),
        "ServiceSpec": {"$ref": "service-spec.schema.json"},
        "ServiceView": object(&[
            ("name", s()), ("version", s()), ("status", json!({"type": "string", "enum": ["active", "deprecated"]})),
            ("registered_at", n()), ("live_entry_count", n()), ("spec", json!({"$ref": "#/components/schemas/ServiceSpec"})),
        ], &["name", "version", "status", "registered_at", "live_entry_count", "spec"]),
        "BackendDescriptor": object(&[
            ("id", s()), ("kind", json!({"type": "string", "enum": ["local-process", "remote-delegate", "mock"]})),
            ("labels", json!({"type": "array", "items": {"type": "string"}})),
            ("capacity", any_obj()), ("allocated", any_obj()),
            ("reachable", json!({"type": "array", "items": {"type": "string"}})),
            ("endpoint", opt_s()),
        ], &["id", "kind", "capacity"]),
        "BackendRegistration": {"allOf": [
            {"$ref": "#/components/schemas/BackendDescriptor"},
            object(&[("credential", s()), ("scripts", any_obj())], &[]),
        ]},
        "StoreState": any_obj(),
    })
}

/// The OpenAPI document of this router, checked into `docs/openapi.json`.
pub fn openapi() -> Value {
    let mut paths = serde_json::Map::new();
    for op in OPS {
        let mut responses = serde_json::Map::new();
        responses.insert(
            op.ok.0.to_string(),
            json!({"description": "success", "content": {"application/json": {"schema": schema_ref(op.ok.1)}}}),
        );
        for code in op.errors {
            responses.insert(
                code.to_string(),
                json!({"description": "error", "content": {"application/json": {"schema": schema_ref("ErrorBody")}}}),
            );
        }
        let params: Vec<Value> = op
            .path
            .split('/')
            .filter_map(|seg| seg.strip_prefix('{')?.strip_suffix('}'))
            .map(|name| json!({"name": name, "in": "path", "required": true, "schema": {"type": "string"}}))
            .collect();
        let mut o = json!({"summary": op.summary, "responses": responses});
        if !params.is_empty() {
            o["parameters"] = params.into();
        }
        if let Some(body) = op.body {
            o["requestBody"] = json!({"required": true, "content": {"application/json": {"schema": schema_ref(body)}}});
        }
        o["security"] = if op.auth {
            json!([{"bearer": []}])
        } else {
            json!([])
        };
        paths
            .entry(op.path)
            .or_insert_with(|| json!({}))
            .as_object_mut()
            .expect("path item")
            .insert(op.method.into(), o);
    }
    json!({
        "openapi": "3.1.0",
        "info": {"title": "conductor", "version": env!("CARGO_PKG_VERSION")},
        "paths": paths,
        "components": {
            "schemas": schemas(),
            "securitySchemes": {"bearer": {"type": "http", "scheme": "bearer"}},
        },
    })
}
