use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// Cumulative counters of one key manager.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KmmStats {
    pub keys_stored: u64,
    pub bits_stored: u64,
    pub keys_rejected: u64,
    pub keys_served: u64,
    pub bits_served: u64,
    /// Relayed keys that arrived here as their final destination.
    pub keys_relayed: u64,
    pub relays_initiated: u64,
    pub relays_acknowledged: u64,
    pub relay_parcels_forwarded: u64,
    pub relay_failures: u64,
    pub link_keys_consumed_by_relay: u64,
    pub keys_expired: u64,
    pub served_bits_per_session: BTreeMap<String, u64>,
    pub retrieval_latency_samples: u64,
    pub retrieval_latency_sum_secs: f64,
}

impl KmmStats {
    pub fn mean_retrieval_latency_secs(&self) -> f64 {
        if self.retrieval_latency_samples == 0 {
            0.0
        } else {
            self.retrieval_latency_sum_secs / self.retrieval_latency_samples as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Master,
    Slave,
}

/// Append-only record of what a key manager did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum KmmEvent {
    Stored {
        key_id: Uuid,
        link_id: String,
        bits: u64,
        latency_secs: f64,
    },
    Rejected {
        key_id: Uuid,
        link_id: String,
        bits: u64,
    },
    Served {
        session: String,
        sae: String,
        side: Side,
        key_id: Uuid,
        bits: u64,
    },
    RelaySent {
        ksid: Uuid,
        key_id: Uuid,
        link_key_id: Uuid,
    },
    RelayForwarded {
        ksid: Uuid,
        key_id: Uuid,
        in_link_key_id: Uuid,
        out_link_key_id: Uuid,
    },
    RelayDelivered {
        ksid: Uuid,
        key_id: Uuid,
        link_key_id: Uuid,
        hops: usize,
    },
    RelayAcked {
        ksid: Uuid,
        key_id: Uuid,
    },
    RelayFailed {
        ksid: Uuid,
        key_id: Uuid,
        hop_index: usize,
        reason: String,
    },
    Expired {
        key_id: Uuid,
    },
}
