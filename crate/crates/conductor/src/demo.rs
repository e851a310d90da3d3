//! Small workloads used by examples and tests, run as `conductor demo ...`.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use axum::extract::Request;
use axum::Json;
use serde_json::{json, Value};

/// Serves every request with a JSON description of it. Reads `GREETING`
/// from the environment so launches can be told apart.
pub async fn echo_http(port: u16) -> anyhow::Result<()> {
    let greeting = std::env::var("GREETING").unwrap_or_else(|_| "hello from echo".into());
    let app = axum::Router::new().fallback(move |req: Request| {
        let greeting = greeting.clone();
        async move { Json(describe(&greeting, &req)) }
    });
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app).await?;
    Ok(())
}

fn describe(greeting: &str, req: &Request) -> Value {
    let headers: BTreeMap<String, String> = req
        .headers()
        .iter()
        .map(|(k, v)| {
            (
                k.to_string(),
                String::from_utf8_lossy(v.as_bytes()).into_owned(),
            )
        })
        .collect();
    json!({
        "greeting": greeting,
        "method": req.method().as_str(),
        "path": req.uri().path(),
        "query": req.uri().query(),
        "headers": headers,
    })
}

/// Sleeps, then exits with `code`. A workload with a known lifetime.
pub async fn sleep_exit(ms: u64, code: i32) -> ! {
    tokio::time::sleep(std::time::Duration::from_millis(ms)).await;
    std::process::exit(code)
}
