use std::time::Duration;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::material::KeyMaterial;
use crate::time::SimTime;

/// Link id recorded on keys that arrived through relay.
pub const RELAYED: &str = "relayed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyState {
    Available,
    Reserved,
    Assigned,
    Consumed,
    Expired,
}

impl KeyState {
    pub fn is_terminal(self) -> bool {
        matches!(self, KeyState::Consumed | KeyState::Expired)
    }

    /// The legal transition set:
    /// available -> reserved | assigned | expired,
    /// reserved -> assigned | expired | available,
    /// assigned -> consumed.
    pub fn can_become(self, to: KeyState) -> bool {
        use KeyState::*;
        matches!(
            (self, to),
            (Available, Reserved)
                | (Available, Assigned)
                | (Available, Expired)
                | (Reserved, Assigned)
                | (Reserved, Expired)
                | (Reserved, Available)
                | (Assigned, Consumed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Key {
    pub key_id: Uuid,
    pub material: KeyMaterial,
    /// Origin link, or [`RELAYED`].
    pub link_id: String,
    pub created_at: SimTime,
    pub ttl: Duration,
    pub state: KeyState,
}

impl Key {
    pub fn deadline(&self) -> SimTime {
        self.created_at + self.ttl
    }

    /// Expiry is strict: a key is still valid at exactly `created_at + ttl`.
    pub fn is_past_ttl(&self, now: SimTime) -> bool {
        now > self.deadline()
    }

    pub fn bits(&self) -> u64 {
        self.material.bits()
    }
}

/// One observed state change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyTransition {
    pub key_id: Uuid,
    pub from: KeyState,
    pub to: KeyState,
    pub at: SimTime,
}
