use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::messages::PathAssignment;

/// Quality-of-service parameters of a key stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QosSpec {
    pub key_chunk_size_bits: u32,
    #[serde(default)]
    pub min_rate_bps: f64,
    /// Key lifetime for this stream, overriding the manager default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl_override: Option<f64>,
    #[serde(default)]
    pub priority: u8,
}

impl Default for QosSpec {
    fn default() -> Self {
        QosSpec {
            key_chunk_size_bits: 256,
            min_rate_bps: 0.0,
            ttl_override: None,
            priority: 0,
        }
    }
}

impl QosSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.key_chunk_size_bits == 0 || self.key_chunk_size_bits % 8 != 0 {
            return Err(format!(
                "key_chunk_size_bits {} is not a positive multiple of 8",
                self.key_chunk_size_bits
            ));
        }
        if !(self.min_rate_bps >= 0.0 && self.min_rate_bps.is_finite()) {
            return Err(format!("min_rate_bps {} must be >= 0", self.min_rate_bps));
        }
        if let Some(ttl) = self.ttl_override {
            if !(ttl > 0.0 && ttl.is_finite()) {
                return Err(format!("ttl_override {ttl} must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Requested,
    Active,
    Closed,
}

/// A master/slave SAE pairing identified by its KSID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyStreamSession {
    pub ksid: Uuid,
    pub master_sae: String,
    pub slave_sae: String,
    pub qos: QosSpec,
    /// `None` while the endpoints share a direct link.
    pub path: Option<PathAssignment>,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

impl KeyStreamSession {
    pub fn is_relayed(&self) -> bool {
        self.path.is_some()
    }
}

/// Key Allocation admission: the aggregate reserved rate on a link may not
/// exceed `fraction` of that link's rate.
pub fn admit(existing_bps: f64, requested_bps: f64, link_rate_bps: f64, fraction: f64) -> bool {
    requested_bps <= 0.0 || existing_bps + requested_bps <= fraction * link_rate_bps
}
