//! The conductor orchestration engine: service registry, event lifecycle,
//! execution backends, token-gated ingress, REST API and CLI.

pub mod api;
pub mod authz;
pub mod backends;
pub mod cli;
pub mod client;
pub mod clock;
pub mod config;
pub mod demo;
pub mod ingress;
pub mod lifecycle;
pub mod orchestrator;
pub mod records;
pub mod registry;
pub mod server;
pub mod store;
pub mod wire;
