//! Payload bodies exchanged between key managers, the controller and SAEs.
//!
//! Every body travels as the `payload` of a [`crate::broker::BrokerEnvelope`]
//! with the matching [`crate::broker::PayloadKind`].

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::time::SimTime;

/// Announcement a key manager sends on start-up: who it is and who its
/// direct neighbours are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloMessage {
    pub kmm_id: String,
    pub neighbor_ids: Vec<String>,
    pub timestamp: SimTime,
    /// Link details per neighbour, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<NeighborLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborLink {
    pub neighbor: String,
    pub link_id: String,
    pub rate_bps: f64,
}

/// Ask the controller for a path between two key managers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRequest {
    pub ksid: Uuid,
    pub src: String,
    pub dst: String,
    pub master_sae: String,
    pub slave_sae: String,
    pub key_chunk_size_bits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl_secs: Option<f64>,
}

/// Ordered node sequence bound to a key stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathAssignment {
    pub ksid: Uuid,
    pub nodes: Vec<String>,
    pub computed_at: SimTime,
    /// True when no path satisfied the key-material filter and the plain
    /// hop-count path was used instead.
    #[serde(default)]
    pub degraded: bool,
    /// Intermediate nodes that see plaintext key material during relay.
    pub trusted_nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck_rate_bps: Option<f64>,
}

impl PathAssignment {
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn source(&self) -> &str {
        &self.nodes[0]
    }

    pub fn destination(&self) -> &str {
        self.nodes.last().expect("assignment has at least two nodes")
    }

    pub fn position(&self, kmm: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == kmm)
    }

    /// Does the path use the edge between `a` and `b` (either direction)?
    pub fn traverses(&self, a: &str, b: &str) -> bool {
        self.nodes
            .windows(2)
            .any(|w| (w[0] == a && w[1] == b) || (w[0] == b && w[1] == a))
    }
}

/// Body of a `path_assign` envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathAssign {
    pub assignment: PathAssignment,
    pub request: PathRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathAck {
    pub ksid: Uuid,
    pub computed_at: SimTime,
    pub kmm_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoPath {
    pub ksid: Uuid,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayAck {
    pub ksid: Uuid,
    pub key_id: Uuid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayFail {
    pub ksid: Uuid,
    pub key_id: Uuid,
    pub at_node: String,
    pub hop_index: usize,
    pub reason: String,
}

/// Tells the slave-side key manager which keys the master side handed out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPin {
    pub master_sae: String,
    pub slave_sae: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ksid: Option<Uuid>,
    pub keys: Vec<PinnedKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedKey {
    pub key_id: Uuid,
    pub size_bits: u32,
    /// Link keys the delivered key was cut from. Empty when the key is a
    /// link key itself.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<Uuid>,
}

/// Master SAE telling its slave which key to fetch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyAnnounce {
    pub master_sae: String,
    pub slave_sae: String,
    pub key_id: Uuid,
    pub sent_at: SimTime,
}
