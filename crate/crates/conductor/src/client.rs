//! Typed HTTP client for the REST API.

use std::time::Duration;

use conductor_core::{BackendDescriptor, ServiceSpec};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::wire::{
    AddEntryRequest, BackendRegistration, ErrorBody, EventView, ServiceView, ShareRequest,
    StartRequest, StartResponse, TokenResponse, ToolDescriptor,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("{status}: {} ({})", body.message, body.code)]
    Api { status: u16, body: ErrorBody },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.code),
            _ => None,
        }
    }
}

/// Raw response, for callers that pass bodies through untouched.
#[derive(Debug, Clone)]
pub struct RawResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ApiClient {
    base: String,
    credential: Option<String>,
    http: reqwest::Client,
}

impl ApiClient {
    pub fn new(base: &str, credential: Option<String>) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("http client");
        Self {
            base: base.trim_end_matches('/').to_string(),
            credential,
            http,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn raw(
        &self,
        method: Method,
        path: &str,
        body: Option<&(impl Serialize + ?Sized)>,
    ) -> Result<RawResponse, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(c) = &self.credential {
            req = req.bearer_auth(c);
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .bytes()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?
            .to_vec();
        Ok(RawResponse { status, body })
    }

    async fn call<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&(impl Serialize + ?Sized)>,
    ) -> Result<T, ClientError> {
        let raw = self.raw(method, path, body).await?;
        decode(raw)
    }

    pub async fn start(
        &self,
        service: &str,
        req: &StartRequest,
    ) -> Result<StartResponse, ClientError> {
        self.call(Method::POST, &format!("/start/{service}"), Some(req))
            .await
    }

    pub async fn add_entry(
        &self,
        event_id: &str,
        service: &str,
        req: &StartRequest,
    ) -> Result<StartResponse, ClientError> {
        let body = AddEntryRequest {
            service: service.into(),
            start: req.clone(),
        };
        self.call(
            Method::POST,
            &format!("/events/{event_id}/services"),
            Some(&body),
        )
        .await
    }

    pub async fn event(&self, event_id: &str) -> Result<EventView, ClientError> {
        self.call(Method::GET, &format!("/events/{event_id}"), None::<&()>)
            .await
    }

    pub async fn events(&self) -> Result<Vec<EventView>, ClientError> {
        self.call(Method::GET, "/events", None::<&()>).await
    }

    pub async fn terminate(&self, event_id: &str) -> Result<EventView, ClientError> {
        self.call(Method::DELETE, &format!("/events/{event_id}"), None::<&()>)
            .await
    }

    pub async fn share(
        &self,
        event_id: &str,
        req: &ShareRequest,
    ) -> Result<EventView, ClientError> {
        self.call(
            Method::POST,
            &format!("/events/{event_id}/share"),
            Some(req),
        )
        .await
    }

    pub async fn token(&self, event_id: &str) -> Result<TokenResponse, ClientError> {
        self.call(
            Method::GET,
            &format!("/events/{event_id}/token"),
            None::<&()>,
        )
        .await
    }

    pub async fn manifest(&self) -> Result<Vec<ToolDescriptor>, ClientError> {
        self.call(Method::GET, "/manifest", None::<&()>).await
    }

    pub async fn services(&self) -> Result<Vec<ServiceView>, ClientError> {
        self.call(Method::GET, "/services", None::<&()>).await
    }

    pub async fn register_service(&self, spec: &ServiceSpec) -> Result<ServiceView, ClientError> {
        self.call(Method::POST, "/services", Some(spec)).await
    }

    pub async fn deprecate(&self, name: &str, version: &str) -> Result<ServiceView, ClientError> {
        self.call(
            Method::POST,
            &format!("/services/{name}/{version}/deprecate"),
            None::<&()>,
        )
        .await
    }

    pub async fn backends(&self) -> Result<Vec<BackendDescriptor>, ClientError> {
        self.call(Method::GET, "/backends", None::<&()>).await
    }

    pub async fn register_backend(
        &self,
        reg: &BackendRegistration,
    ) -> Result<BackendDescriptor, ClientError> {
        self.call(Method::POST, "/backends", Some(reg)).await
    }
}

pub fn decode<T: DeserializeOwned>(raw: RawResponse) -> Result<T, ClientError> {
    if StatusCode::from_u16(raw.status).is_ok_and(|s| s.is_success()) {
        return serde_json::from_slice(&raw.body).map_err(|e| ClientError::Decode(e.to_string()));
    }
    let body = serde_json::from_slice(&raw.body).unwrap_or_else(|_| ErrorBody {
        code: "http_error".into(),
        message: String::from_utf8_lossy(&raw.body).into_owned(),
        request_id: String::new(),
    });
    Err(ClientError::Api {
        status: raw.status,
        body,
    })
}
