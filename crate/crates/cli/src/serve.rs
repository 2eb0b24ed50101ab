//! HTTP front for the key delivery API. Virtual time stands still while
//! serving; every request is answered at the warm-up instant.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use anyhow::Result;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, Method as HttpMethod, StatusCode, Uri};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::{Json, Router};
use qkdn_core::harness::Network;
use qkdn_core::kmm::northbound::{Method, Request};
use serde_json::{json, Value};

/// Header carrying the calling SAE's identity.
pub const SAE_HEADER: &str = "x-sae-id";

pub type SharedNetwork = Arc<Mutex<Network>>;

pub fn router(net: SharedNetwork) -> Router {
    Router::new().fallback(dispatch).with_state(net)
}

fn reply(status: u16, body: Value) -> HttpResponse {
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, Json(body)).into_response()
}

async fn dispatch(
    State(net): State<SharedNetwork>,
    method: HttpMethod,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> HttpResponse {
    let method = match method {
        HttpMethod::GET => Method::Get,
        HttpMethod::POST => Method::Post,
        other => return reply(405, json!({ "message": format!("{other} not allowed") })),
    };
    let Some(caller) = headers.get(SAE_HEADER).and_then(|v| v.to_str().ok()) else {
        return reply(401, json!({ "message": format!("missing {SAE_HEADER} header") }));
    };
    let body = if body.is_empty() {
        None
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => Some(v),
            Err(e) => return reply(400, json!({ "message": e.to_string() })),
        }
    };
    let req = Request {
        method,
        path: uri.path().to_string(),
        caller: caller.to_string(),
        body,
    };
    let resp = net.lock().expect("network lock").northbound(&req);
    reply(resp.status, resp.body)
}

pub async fn serve(net: Network, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving key delivery API on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(Mutex::new(net)))).await?;
    Ok(())
}
