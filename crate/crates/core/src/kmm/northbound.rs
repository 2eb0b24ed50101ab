//! Application-facing key delivery API, shaped after ETSI GS QKD 014.
//!
//! Three routes are served:
//!
//! * `GET  /api/v1/keys/{slave_SAE_ID}/status`
//! * `POST /api/v1/keys/{slave_SAE_ID}/enc_keys`   body `{"number", "size"}`
//! * `POST /api/v1/keys/{master_SAE_ID}/dec_keys`  body `{"key_IDs": [{"key_ID"}]}`
//!
//! The caller's SAE id stands in for the TLS client identity of a real
//! deployment. [`handle`] is transport agnostic; the CLI mounts it on HTTP.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uuid::Uuid;

use super::{Kmm, KmmError};
use crate::time::SimTime;

pub const API_PREFIX: &str = "/api/v1/keys/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub method: Method,
    pub path: String,
    /// Authenticated SAE id of the caller.
    pub caller: String,
    pub body: Option<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub body: Value,
}

impl Response {
    fn ok(body: impl Serialize) -> Self {
        Response {
            status: 200,
            body: serde_json::to_value(body).expect("response bodies serialize"),
        }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        Response {
            status,
            body: json!({ "message": message.into() }),
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub source_KME_ID: String,
    pub target_KME_ID: String,
    pub master_SAE_ID: String,
    pub slave_SAE_ID: String,
    pub key_size: u32,
    pub stored_key_count: usize,
    pub max_key_count: usize,
    pub max_key_per_request: u32,
    pub max_key_size: u32,
    pub min_key_size: u32,
    pub max_SAE_ID_count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyRequest {
    #[serde(default)]
    pub number: Option<u32>,
    #[serde(default)]
    pub size: Option<u32>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyIdRef {
    pub key_ID: Uuid,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyIdsRequest {
    pub key_IDs: Vec<KeyIdRef>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub key_ID: Uuid,
    /// Base64 key material.
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyContainer {
    pub keys: Vec<KeyEntry>,
}

/// HTTP status for a key-manager error.
pub fn status_of(err: &KmmError) -> u16 {
    match err {
        KmmError::InsufficientKeyMaterial { .. }
        | KmmError::NoRoute { .. }
        | KmmError::NoPath(_)
        | KmmError::AdmissionRejected { .. } => 503,
        KmmError::UnknownSae(_) => 401,
        _ => 400,
    }
}

/// Default key size toward `peer_sae`: the stream chunk for relayed pairs,
/// the link block size for direct ones.
fn default_size(kmm: &Kmm, master: &str, slave: &str) -> u32 {
    if let Some(e) = kmm.active_relayed_session(master, slave) {
        return e.session.qos.key_chunk_size_bits;
    }
    kmm.kmm_of(slave)
        .and_then(|k| kmm.peer(k))
        .map_or(256, |p| p.block_bits)
}

pub fn handle(kmm: &mut Kmm, req: &Request, now: SimTime) -> Response {
    let Some(rest) = req.path.strip_prefix(API_PREFIX) else {
        return Response::error(404, format!("no route {}", req.path));
    };
    let Some((sae, op)) = rest.split_once('/') else {
        return Response::error(404, format!("no route {}", req.path));
    };
    if !kmm.serves(&req.caller) {
        return Response::error(401, format!("SAE {:?} is not attached here", req.caller));
    }
    match (req.method, op) {
        (Method::Get, "status") => status(kmm, &req.caller, sae),
        (Method::Post, "enc_keys") | (Method::Get, "enc_keys") => {
            let body: KeyRequest = match &req.body {
                None => KeyRequest::default(),
                Some(v) => match serde_json::from_value(v.clone()) {
                    Ok(b) => b,
                    Err(e) => return Response::error(400, e.to_string()),
                },
            };
            let number = body.number.unwrap_or(1);
            let size = body
                .size
                .unwrap_or_else(|| default_size(kmm, &req.caller, sae));
            match kmm.get_key(&req.caller, sae, number, size, now) {
                Ok(keys) => Response::ok(container(keys)),
                Err(e) => Response::error(status_of(&e), e.to_string()),
            }
        }
        (Method::Post, "dec_keys") => {
            let body: KeyIdsRequest = match req
                .body
                .clone()
                .map(serde_json::from_value)
                .unwrap_or_else(|| Err(serde::de::Error::custom("missing body")))
            {
                Ok(b) => b,
                Err(e) => return Response::error(400, e.to_string()),
            };
            let ids: Vec<Uuid> = body.key_IDs.iter().map(|k| k.key_ID).collect();
            match kmm.get_key_with_ids(&req.caller, sae, &ids, now) {
                Ok(keys) => Response::ok(container(keys)),
                Err(e) => Response::error(status_of(&e), e.to_string()),
            }
        }
        _ => Response::error(405, format!("{:?} {op} not supported", req.method)),
    }
}

fn container(keys: Vec<super::DeliveredKey>) -> KeyContainer {
    KeyContainer {
        keys: keys
            .into_iter()
            .map(|k| KeyEntry {
                key_ID: k.key_id,
                key: k.material.to_base64(),
            })
            .collect(),
    }
}

fn status(kmm: &Kmm, master: &str, slave: &str) -> Response {
    let Some(target) = kmm.kmm_of(slave) else {
        return Response::error(400, format!("unknown slave SAE {slave:?}"));
    };
    let key_size = default_size(kmm, master, slave);
    let max_key_count = (kmm.config().capacity_bits / key_size.max(1) as u64) as usize;
    Response::ok(Status {
        source_KME_ID: kmm.id().to_string(),
        target_KME_ID: target.to_string(),
        master_SAE_ID: master.to_string(),
        slave_SAE_ID: slave.to_string(),
        key_size,
        stored_key_count: kmm.ready_keys(master, slave),
        max_key_count,
        max_key_per_request: kmm.config().max_keys_per_request,
        max_key_size: kmm.config().max_key_size_bits,
        min_key_size: kmm.config().min_key_size_bits,
        max_SAE_ID_count: 0,
    })
}

impl KeyContainer {
    /// Decode into delivered keys; `None` when any entry is not base64.
    pub fn into_keys(self) -> Option<Vec<super::DeliveredKey>> {
        self.keys
            .into_iter()
            .map(|k| {
                crate::material::KeyMaterial::from_base64(&k.key)
                    .ok()
                    .map(|m| super::DeliveredKey {
                        key_id: k.key_ID,
                        material: m,
                    })
            })
            .collect()
    }
}
