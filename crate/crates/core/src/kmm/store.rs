use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::key::{Key, KeyState, KeyTransition};
use crate::time::SimTime;

/// Where a live key sits inside a key manager.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pool {
    /// Link keys shared with a directly connected peer.
    Link(String),
    /// Relayed end-to-end keys of a key stream, ready to serve.
    Session(Uuid),
    /// Relay targets at the source, not yet acknowledged by the destination.
    Target(Uuid),
    /// Keys cut from several link keys for a single request.
    Derived,
}

/// SAE pair a key was handed to (or pinned for).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub master_sae: String,
    pub slave_sae: String,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub key: Key,
    pub pool: Pool,
    /// This side may draw the key on its own initiative.
    pub owned: bool,
    pub binding: Option<Binding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IllegalTransition {
    pub key_id: Uuid,
    pub from: KeyState,
    pub to: KeyState,
}

/// All keys of one key manager. Live keys keep their material; terminal keys
/// are reduced to a tombstone holding only their final state.
#[derive(Debug, Default)]
pub struct KeyStore {
    live: HashMap<Uuid, Entry>,
    pools: BTreeMap<Pool, IndexSet<Uuid>>,
    pool_bits: BTreeMap<Pool, u64>,
    retired: HashMap<Uuid, KeyState>,
    deadlines: BTreeSet<(SimTime, Uuid)>,
    journal: Option<Vec<KeyTransition>>,
}

impl KeyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record every state transition.
    pub fn with_journal(mut self) -> Self {
        self.journal = Some(Vec::new());
        self
    }

    pub fn journal(&self) -> &[KeyTransition] {
        self.journal.as_deref().unwrap_or(&[])
    }

    pub fn knows(&self, id: &Uuid) -> bool {
        self.live.contains_key(id) || self.retired.contains_key(id)
    }

    pub fn state(&self, id: &Uuid) -> Option<KeyState> {
        self.live
            .get(id)
            .map(|e| e.key.state)
            .or_else(|| self.retired.get(id).copied())
    }

    pub fn get(&self, id: &Uuid) -> Option<&Entry> {
        self.live.get(id)
    }

    pub fn get_mut(&mut self, id: &Uuid) -> Option<&mut Entry> {
        self.live.get_mut(id)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Insert a fresh key; every key enters as available. Returns `false`
    /// (and changes nothing) when the id has been seen before.
    pub fn insert(&mut self, key: Key, pool: Pool, owned: bool, binding: Option<Binding>) -> bool {
        debug_assert_eq!(key.state, KeyState::Available);
        if self.knows(&key.key_id) {
            return false;
        }
        let id = key.key_id;
        self.deadlines.insert((key.deadline(), id));
        *self.pool_bits.entry(pool.clone()).or_default() += key.bits();
        self.pools.entry(pool.clone()).or_default().insert(id);
        self.live.insert(
            id,
            Entry {
                key,
                pool,
                owned,
                binding,
            },
        );
        true
    }

    pub fn transition(
        &mut self,
        id: &Uuid,
        to: KeyState,
        now: SimTime,
    ) -> Result<(), IllegalTransition> {
        let entry = self.live.get_mut(id).ok_or(IllegalTransition {
            key_id: *id,
            from: self.retired.get(id).copied().unwrap_or(KeyState::Consumed),
            to,
        })?;
        let from = entry.key.state;
        if !from.can_become(to) {
            return Err(IllegalTransition {
                key_id: *id,
                from,
                to,
            });
        }
        entry.key.state = to;
        if let Some(j) = &mut self.journal {
            j.push(KeyTransition {
                key_id: *id,
                from,
                to,
                at: now,
            });
        }
        if to.is_terminal() {
            self.retire(id);
        }
        Ok(())
    }

    fn retire(&mut self, id: &Uuid) {
        if let Some(mut e) = self.live.remove(id) {
            let bits = e.key.bits();
            e.key.material.erase();
            if let Some(set) = self.pools.get_mut(&e.pool) {
                set.shift_remove(id);
            }
            if let Some(b) = self.pool_bits.get_mut(&e.pool) {
                *b = b.saturating_sub(bits);
            }
            self.deadlines.remove(&(e.key.deadline(), *id));
            self.retired.insert(*id, e.key.state);
        }
    }

    pub fn move_to_pool(&mut self, id: &Uuid, pool: Pool) {
        let Some(e) = self.live.get_mut(id) else {
            return;
        };
        if e.pool == pool {
            return;
        }
        let bits = e.key.bits();
        let old = std::mem::replace(&mut e.pool, pool.clone());
        if let Some(set) = self.pools.get_mut(&old) {
            set.shift_remove(id);
        }
        if let Some(b) = self.pool_bits.get_mut(&old) {
            *b = b.saturating_sub(bits);
        }
        self.pools.entry(pool.clone()).or_default().insert(*id);
        *self.pool_bits.entry(pool).or_default() += bits;
    }

    /// Ids in `pool`, oldest first.
    pub fn pool_ids(&self, pool: &Pool) -> impl Iterator<Item = &Uuid> {
        self.pools.get(pool).into_iter().flatten()
    }

    /// Entries in `pool`, oldest first.
    pub fn pool_entries(&self, pool: &Pool) -> impl Iterator<Item = &Entry> {
        self.pool_ids(pool).filter_map(|id| self.live.get(id))
    }

    /// Bits held by live keys in `pool`.
    pub fn pool_bits(&self, pool: &Pool) -> u64 {
        self.pool_bits.get(pool).copied().unwrap_or(0)
    }

    pub fn pools(&self) -> impl Iterator<Item = &Pool> {
        self.pools.keys()
    }

    /// Retire every live key whose TTL has elapsed. Available and reserved
    /// keys become expired; keys already handed to an SAE are consumed, the
    /// only exit the state machine allows them. Returns the ids that expired.
    pub fn expire(&mut self, now: SimTime) -> Vec<Uuid> {
        let mut expired = Vec::new();
        while let Some(&(deadline, id)) = self.deadlines.first() {
            if now <= deadline {
                break;
            }
            self.deadlines.pop_first();
            let Some(state) = self.live.get(&id).map(|e| e.key.state) else {
                continue;
            };
            let to = match state {
                KeyState::Assigned => KeyState::Consumed,
                _ => KeyState::Expired,
            };
            self.transition(&id, to, now)
                .expect("non-terminal key has a ttl exit");
            if to == KeyState::Expired {
                expired.push(id);
            }
        }
        expired
    }
}
